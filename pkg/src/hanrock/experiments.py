"""Experiment presets and the desk-scale H1/H2/H3 harness."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .aux_targets import FAMILIES, N_AUX, build_aux_table
from .corpus import (Corpus, TaskKind, Vocabulary, generate_synthetic, make_manifest, serialize_corpus,
                     split_partitions, write_manifest)
from .evaluation import bootstrap_compare, save_report, starred_table
from .training import HParams, SearchContext, SearchSpace, TrialTable, random_search, train, with_fixed
from .models import HanModel
from .weighting import WeightVector, compute_mi_vector

PRESET_NAMES = ("h1-baseline", "h1-ap", "h1-aphf", "h2", "h3-flat", "h3-rock", "custom")


def family_mask(*families: str) -> np.ndarray:
    mask = np.zeros(N_AUX, dtype=bool)
    for fam in families:
        if fam not in FAMILIES:
            raise ValueError(f"unknown auxiliary family {fam!r}")
        mask[list(FAMILIES[fam])] = True
    return mask


ALL_FAMILIES = ("actions", "prosody", "historical", "future")


@dataclass(frozen=True)
class Preset:
    """Architecture variant, which auxiliary tasks get loss weight, pinned hparams."""

    name: str
    variant: str
    active: tuple
    fixed: dict = field(default_factory=dict, hash=False)

    @property
    def active_mask(self) -> np.ndarray:
        return np.asarray(self.active, dtype=bool)

    def to_json(self) -> dict:
        return {"name": self.name, "variant": self.variant, "active": [bool(a) for a in self.active],
                "fixed": dict(self.fixed)}


def expand_preset(name: str, P: int | None = None) -> Preset:
    """Fully specified preset; ``h2:P`` (or ``name="h2", P=...``) pins the primary units."""
    if name.startswith("h2:"):
        name, P = "h2", int(name.split(":", 1)[1])
    all_active = tuple(bool(v) for v in family_mask(*ALL_FAMILIES))
    if name == "h1-baseline":
        return Preset(name, "rock", (False,) * N_AUX)
    if name == "h1-ap":
        return Preset(name, "rock", tuple(bool(v) for v in family_mask("actions", "prosody")))
    if name in ("h1-aphf", "h3-rock", "custom"):
        return Preset(name, "rock", all_active)
    if name == "h3-flat":
        return Preset(name, "flat", all_active)
    if name == "h2":
        if P is None:
            raise ValueError("preset h2 needs P (use 'h2:P')")
        return Preset(f"h2:{P}", "rock", all_active, {"P": int(P)})
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def preset_weights(preset: Preset, ctx: SearchContext, hp: HParams) -> WeightVector:
    ctx.active = preset.active_mask
    return ctx.weights_for(hp)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class DeskConfig:
    """Scaled-down experiment settings (capacity P + A = 33 instead of 257)."""

    n_conversations: int = 60
    turns_per_conv: int = 20
    data_seed: int = 0
    task: str = "classification"
    capacity: int = 33
    P: int = 32
    P_sweep: tuple = (1, 16, 32)
    embed_dim: int = 50
    fusion_dim: int = 16
    T: int = 60
    budget: int = 3
    max_epochs: int = 8
    master_seed: int = 0
    bootstrap_B: int = 1000
    fixed: dict = field(default_factory=lambda: {"batch_size": 32, "L": 3, "learning_rate": 2.0 ** -6})

    def space(self) -> SearchSpace:
        return SearchSpace(P_choices=(self.P,), fixed=dict(self.fixed))

    def to_json(self) -> dict:
        d = asdict(self)
        d["P_sweep"] = list(self.P_sweep)
        return d


def prepare_desk(cfg: DeskConfig) -> tuple[Corpus, Vocabulary, object, object]:
    corpus = generate_synthetic(cfg.n_conversations, cfg.turns_per_conv, TaskKind.parse(cfg.task), cfg.data_seed)
    corpus = split_partitions(corpus, make_manifest(corpus))
    table = build_aux_table(corpus)
    return corpus, Vocabulary.build(corpus), table, compute_mi_vector(corpus, table)


def desk_context(cfg: DeskConfig, prepared, preset: Preset) -> SearchContext:
    corpus, vocab, table, mi = prepared
    return SearchContext(corpus, vocab, table, mi, variant=preset.variant, capacity=cfg.capacity, T=cfg.T,
                         embed_dim=cfg.embed_dim, fusion_dim=cfg.fusion_dim, active=preset.active_mask,
                         max_epochs=cfg.max_epochs)


def run_preset(cfg: DeskConfig, prepared, preset: Preset, log=None) -> TrialTable:
    ctx = desk_context(cfg, prepared, preset)
    space = with_fixed(cfg.space(), **preset.fixed)
    if preset.variant == "flat":
        space = with_fixed(space, P=cfg.P)
    table = random_search(ctx, space, n=cfg.budget, master_seed=cfg.master_seed, log=log)
    table.meta["preset"] = preset.to_json()
    return table


HYPOTHESES = {
    "h1": ("h1-baseline", ("h1-ap", "h1-aphf")),
    "h3": ("h3-flat", ("h3-rock",)),
}


def _comparisons(cfg: DeskConfig, which: str) -> tuple[str, list[str]]:
    if which == "h2":
        top = max(cfg.P_sweep)
        return f"h2:{top}", [f"h2:{p}" for p in sorted(cfg.P_sweep, reverse=True) if p != top]
    base, challengers = HYPOTHESES[which]
    return base, list(challengers)


def run_desk_experiments(cfg: DeskConfig, out_dir, hypotheses=("h1", "h2", "h3"),
                         log: Callable[[str], None] | None = None) -> dict:
    """Run the requested hypotheses and write tables, reports and a manifest.

    Every artifact lands under ``out_dir`` with a stable relative path; the
    manifest lists each artifact's sha256.
    """
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    prepared = prepare_desk(cfg)
    corpus, vocab, aux_table, mi = prepared
    serialize_corpus(corpus, out / "corpus.jsonl")
    write_manifest({p: sorted(c.conversation_id for c in corpus.in_partition(p)) for p in ("train", "dev", "test")},
                   out / "partitions.json")
    aux_table.to_jsonl(out / "aux_targets.jsonl")
    write_json(mi.to_json(), out / "mi.json")

    tables: dict[str, TrialTable] = {}

    def table_for(name: str) -> TrialTable:
        preset = expand_preset(name)
        # h3-rock and h2 at the default P are the same search as h1-aphf
        key = "h1-aphf" if preset.name in ("h3-rock", f"h2:{cfg.P}") else preset.name
        if key not in tables:
            if log:
                log(f"searching {key}")
            tables[key] = run_preset(cfg, prepared, expand_preset(key), log)
            tables[key].save(out / "tables" / f"{key.replace(':', '_')}.json")
        return tables[key]

    summaries = {}
    text = []
    for hyp in hypotheses:
        base_name, challengers = _comparisons(cfg, hyp)
        base = table_for(base_name)
        rows = [(f"{base_name} (baseline)", _selected_test(base), None)]
        for ch_name in challengers:
            ch = table_for(ch_name)
            rep = bootstrap_compare(base, ch, B=cfg.bootstrap_B, seed=cfg.master_seed)
            rep.meta.update({"baseline": base_name, "challenger": ch_name})
            save_report(rep, out / "reports" / f"{hyp}_{ch_name.replace(':', '_')}.json")
            rows.append((ch_name, _selected_test(ch), rep))
        metric = "MA(4)" if corpus.task.is_classification else "MAE"
        block = starred_table(f"{hyp.upper()} results (test {metric} of the best-dev trial)", metric, rows)
        text.append(block)
        summaries[hyp] = {"baseline": base_name, "challengers": challengers}
    (out / "tables.txt").write_text("\n".join(text), encoding="utf-8")

    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": "experiment",
        "config": cfg.to_json(),
        "hypotheses": list(hypotheses),
        "summaries": summaries,
        "artifacts": {a: sha256_file(out / a) for a in artifacts},
    }
    write_json(manifest, out / "manifest.json")
    return manifest


def _selected_test(table: TrialTable) -> float:
    return float(table.best().test_metric.mean())


# ---------------------------------------------------------------------------
# fixed-config seed study (H1 non-degradation check)


def seed_study(cfg: DeskConfig, preset_names, seeds, hp: HParams, prepared=None) -> dict[str, list[float]]:
    """Best dev objective per seed for each preset with fixed hyperparameters."""
    prepared = prepared or prepare_desk(cfg)
    out: dict[str, list[float]] = {}
    for name in preset_names:
        preset = expand_preset(name)
        ctx = desk_context(cfg, prepared, preset)
        scores = []
        for seed in seeds:
            h = HParams(**{**hp.to_json(), "seed": int(seed), **preset.fixed})
            model = HanModel(ctx.model_config(h), len(ctx.vocab), seed=h.seed)
            res = train(model, ctx.windows(h.L, "train"), ctx.windows(h.L, "dev"), h, ctx.weights_for(h),
                        max_epochs=cfg.max_epochs)
            scores.append(float(res.best_objective))
        out[name] = scores
    return out
