"""Command-line interface: ``hanrock <command> [options]``.

Commands write their artifacts under ``--out`` together with a
``manifest.json`` that records seeds, settings and input hashes.  Any option
can also come from a JSON ``--config`` file keyed by the option's long name
(dashes or underscores); explicit flags win over file values.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aux_targets import build_aux_table
from .corpus import (CorpusError, TaskKind, Vocabulary, generate_synthetic, make_manifest, parse_corpus,
                     read_manifest, serialize_corpus, split_partitions, write_manifest)
from .evaluation import bootstrap_compare, classwise_f1, ma4, mae, save_report, starred_table
from .experiments import DeskConfig, expand_preset, run_desk_experiments, sha256_file, write_json
from .layers import build_embedding_matrix, read_embedding_file
from .models import HanModel, load_checkpoint, save_checkpoint
from .report import report_for
from .training import (HParams, SearchContext, SearchSpace, TrainingError, TrialTable, WindowData,
                       primary_outputs, random_search, train, with_fixed)
from .weighting import compute_mi_vector, save_json


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# option name -> HParams field
HPARAM_FLAGS = {
    "learning_rate": "learning_rate",
    "batch_size": "batch_size",
    "pri_gru": "P",
    "l2": "l2",
    "content_size": "L",
    "gru_dropout": "gru_dropout",
    "recurrent_dropout": "recurrent_dropout",
    "scheme": "scheme",
    "w_primary": "w_primary",
    "seed": "seed",
}


def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="talkturn JSONL file")
    p.add_argument("--partitions", help="partition manifest JSON (train/dev/test conversation ids)")
    p.add_argument("--task", help="'classification' or 'regression:LO:HI'")
    p.add_argument("--embeddings", help="optional text embedding file (token v1 ... vd)")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=("flat", "rock"))
    p.add_argument("--preset", help="h1-baseline, h1-ap, h1-aphf, h2:P, h3-flat, h3-rock or custom")
    p.add_argument("--capacity", type=int, help="P + A (default 257)")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--fusion-dim", type=int)
    p.add_argument("--max-tokens", type=int, help="tokens kept per talkturn (T)")
    p.add_argument("--max-epochs", type=int)


def _add_hparams(p: argparse.ArgumentParser) -> None:
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pri-gru", type=int, help="GRU units of the primary talkturn encoder (P)")
    p.add_argument("--l2", type=float)
    p.add_argument("--content-size", type=int, help="talkturns per input window (L)")
    p.add_argument("--gru-dropout", type=float)
    p.add_argument("--recurrent-dropout", type=float)
    p.add_argument("--scheme", help="random, linear-mi or softmax-mi")
    p.add_argument("--w-primary", type=float)
    p.add_argument("--seed", type=int)


DEFAULTS = {
    "task": "classification", "variant": None, "preset": "custom", "capacity": 257, "embed_dim": 300,
    "fusion_dim": 64, "max_tokens": 60, "max_epochs": 350, "n_conversations": 60, "turns": 20,
    "budget": 30, "master_seed": 0, "parallelism": 1, "B": 1000, "partition": "test", "format": "text",
    "learning_rate": 2.0 ** -7, "batch_size": 32, "pri_gru": 256, "l2": 0.0, "content_size": 5,
    "gru_dropout": 0.1, "recurrent_dropout": 0.1, "scheme": "softmax-mi", "w_primary": 0.75, "seed": 0,
    "hypotheses": "h1,h2,h3",
}
# desk-scale experiment runs use their own, smaller defaults
COMMAND_DEFAULTS = {"experiment": {"budget": DeskConfig.budget, "max_epochs": DeskConfig.max_epochs}}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hanrock", description="Auxiliary-task hierarchical attention networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--out", help="output directory")
        return p

    p = cmd("generate", "write a seeded synthetic corpus and partition manifest")
    p.add_argument("--n-conversations", type=int)
    p.add_argument("--turns", type=int, help="talkturns per conversation")
    p.add_argument("--task")
    p.add_argument("--seed", type=int)

    p = cmd("prepare", "build auxiliary targets, vocabulary and the MI vector")
    _add_inputs(p)

    p = cmd("tune", "random hyperparameter search with median stopping")
    _add_inputs(p)
    _add_model(p)
    _add_hparams(p)
    p.add_argument("--budget", type=int, help="number of trials")
    p.add_argument("--master-seed", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--fix", action="append", default=[], metavar="NAME",
                   help="pin a hyperparameter given by its flag (e.g. --fix pri-gru)")

    p = cmd("train", "train one configuration and save the best-dev checkpoint")
    _add_inputs(p)
    _add_model(p)
    _add_hparams(p)

    p = cmd("eval", "score a checkpoint on one partition")
    _add_inputs(p)
    p.add_argument("--checkpoint")
    p.add_argument("--partition", choices=("train", "dev", "test"))

    p = cmd("compare", "selection-aware paired bootstrap between two trial tables")
    p.add_argument("--baseline")
    p.add_argument("--challenger")
    p.add_argument("--B", type=int, help="bootstrap replicates")
    p.add_argument("--seed", type=int)

    p = cmd("report", "render attention for chosen talkturns")
    _add_inputs(p)
    p.add_argument("--checkpoint")
    p.add_argument("--example", action="append", default=[], metavar="CONV:TURN")
    p.add_argument("--format", choices=("text", "html"))

    p = cmd("experiment", "desk-scale H1/H2/H3 protocol with starred tables")
    p.add_argument("--hypotheses", help="comma-separated subset of h1,h2,h3")
    p.add_argument("--n-conversations", type=int)
    p.add_argument("--turns", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--master-seed", type=int)
    p.add_argument("--B", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS)
    opts.update(COMMAND_DEFAULTS.get(args.command, {}))
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in data.items():
            opts[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if v is not None and v != []:
            opts[k] = v
    opts.setdefault("fix", [])
    return opts


def _need(opts: dict, *names: str) -> None:
    missing = [n for n in names if not opts.get(n)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _out(opts: dict) -> Path:
    _need(opts, "out")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus(opts: dict, need_partitions: bool = True):
    _need(opts, "corpus")
    task = TaskKind.parse(opts["task"])
    corpus = parse_corpus(opts["corpus"], task)
    hashes = {"corpus": sha256_file(opts["corpus"])}
    if opts.get("partitions"):
        corpus = split_partitions(corpus, read_manifest(opts["partitions"]))
        hashes["partitions"] = sha256_file(opts["partitions"])
    elif need_partitions:
        raise UsageError("missing required option: --partitions")
    return corpus, hashes


def _hparams(opts: dict) -> HParams:
    return HParams(**{field: opts[flag] for flag, field in HPARAM_FLAGS.items()})


def _embeddings(opts: dict, vocab: Vocabulary):
    if not opts.get("embeddings"):
        return None
    pre = read_embedding_file(opts["embeddings"], opts["embed_dim"])
    return build_embedding_matrix(vocab.tokens, opts["embed_dim"], pre, seed=opts["seed"])


def _context(opts: dict, corpus, preset):
    table = build_aux_table(corpus)
    vocab = Vocabulary.build(corpus)
    mi = compute_mi_vector(corpus, table)
    return SearchContext(corpus, vocab, table, mi, variant=opts.get("variant") or preset.variant,
                         capacity=opts["capacity"], T=opts["max_tokens"], embed_dim=opts["embed_dim"],
                         fusion_dim=opts["fusion_dim"], embeddings=_embeddings(opts, vocab),
                         active=preset.active_mask, max_epochs=opts["max_epochs"])


def cmd_generate(opts: dict) -> dict:
    out = _out(opts)
    if opts["n_conversations"] < 1 or opts["turns"] < 1:
        raise UsageError("--n-conversations and --turns must be >= 1")
    task = TaskKind.parse(opts["task"])
    corpus = generate_synthetic(opts["n_conversations"], opts["turns"], task, opts["seed"])
    serialize_corpus(corpus, out / "corpus.jsonl")
    write_manifest(make_manifest(corpus), out / "partitions.json")
    return {"command": "generate", "n_conversations": opts["n_conversations"], "turns": opts["turns"],
            "task": str(task), "seed": opts["seed"],
            "outputs": {n: sha256_file(out / n) for n in ("corpus.jsonl", "partitions.json")}}


def cmd_prepare(opts: dict) -> dict:
    out = _out(opts)
    corpus, hashes = _load_corpus(opts, need_partitions=False)
    table = build_aux_table(corpus)
    mi = compute_mi_vector(corpus, table)
    vocab = Vocabulary.build(corpus)
    table.to_jsonl(out / "aux_targets.jsonl")
    save_json(mi, out / "mi.json")
    write_json(vocab.to_json(), out / "vocab.json")
    names = ("aux_targets.jsonl", "mi.json", "vocab.json")
    return {"command": "prepare", "task": opts["task"], "inputs": hashes,
            "outputs": {n: sha256_file(out / n) for n in names}}


def cmd_tune(opts: dict) -> dict:
    out = _out(opts)
    corpus, hashes = _load_corpus(opts)
    preset = expand_preset(opts["preset"])
    ctx = _context(opts, corpus, preset)
    space = SearchSpace(fixed=dict(preset.fixed))
    pins = {}
    for name in opts["fix"]:
        flag = name.replace("-", "_")
        if flag not in HPARAM_FLAGS:
            raise UsageError(f"--fix {name}: not a tunable hyperparameter")
        pins[HPARAM_FLAGS[flag]] = opts[flag]
    space = with_fixed(space, **pins)
    if ctx.variant == "rock" and "P" not in space.fixed:
        space.P_choices = tuple(p for p in space.P_choices if p < ctx.capacity) or (ctx.capacity - 1,)
    table = random_search(ctx, space, n=opts["budget"], parallelism=opts["parallelism"],
                          master_seed=opts["master_seed"], log=lambda s: print(s, file=sys.stderr))
    table.meta["preset"] = preset.to_json()
    table.save(out / "trials.json")
    best = table.best()
    return {"command": "tune", "inputs": hashes, "master_seed": opts["master_seed"], "budget": opts["budget"],
            "preset": preset.to_json(), "space": space.to_json(), "mi": ctx.mi.to_json(),
            "best_trial": best.index, "best_hparams": best.hparams.to_json(),
            "trials": [{"index": r.index, "hparams": r.hparams.to_json(), "stopped_at": r.stopped_at,
                        "weights": r.weights.to_json() if r.weights else None, "status": r.status,
                        "history": r.history} for r in table.records],
            "outputs": {"trials.json": sha256_file(out / "trials.json")}}


def cmd_train(opts: dict) -> dict:
    out = _out(opts)
    corpus, hashes = _load_corpus(opts)
    preset = expand_preset(opts["preset"])
    hp = _hparams(opts)
    ctx = _context(opts, corpus, preset)
    weights = ctx.weights_for(hp)
    model = HanModel(ctx.model_config(hp), len(ctx.vocab), ctx.embeddings, seed=hp.seed)
    res = train(model, ctx.windows(hp.L, "train"), ctx.windows(hp.L, "dev"), hp, weights, opts["max_epochs"])
    ckpt = out / "checkpoint"
    save_checkpoint(res.model, ckpt, ctx.vocab.digest())
    write_json(ctx.vocab.to_json(), ckpt / "vocab.json")
    return {"command": "train", "inputs": hashes, "hparams": hp.to_json(), "weights": weights.to_json(),
            "mi": ctx.mi.to_json(), "preset": preset.to_json(), "history": res.history,
            "train_loss": res.losses, "best_epoch": res.best_epoch, "stopped_at": res.stopped_at,
            "checkpoint": "checkpoint", "max_epochs": opts["max_epochs"],
            "outputs": {f"checkpoint/{n}": sha256_file(ckpt / n) for n in ("manifest.json", "params.bin", "vocab.json")}}


def _load_model(opts: dict):
    _need(opts, "checkpoint")
    ckpt = Path(opts["checkpoint"])
    model, manifest = load_checkpoint(ckpt)
    with open(ckpt / "vocab.json", encoding="utf-8") as fh:
        vocab = Vocabulary.from_json(json.load(fh))
    if manifest.get("vocab_hash") != vocab.digest():
        raise UsageError(f"{ckpt}: vocab.json does not match the checkpoint's vocabulary hash")
    return model, vocab, manifest


def cmd_eval(opts: dict) -> dict:
    out = _out(opts)
    model, vocab, _ = _load_model(opts)
    corpus, hashes = _load_corpus(opts)
    if str(corpus.task) != str(model.cfg.task):
        raise UsageError(f"corpus task {corpus.task} does not match checkpoint task {model.cfg.task}")
    table = build_aux_table(corpus)
    data = WindowData.from_corpus(corpus, vocab, table, model.cfg.L, model.cfg.T, opts["partition"])
    if len(data) == 0:
        raise UsageError(f"partition {opts['partition']} is empty")
    pred = primary_outputs(model, data)
    if model.cfg.task.is_classification:
        y = data.y.astype(np.int64)
        metrics = {"MA(4)": ma4(pred, y, model.cfg.task.n_classes),
                   "f1": [float(v) for v in classwise_f1(pred, y, model.cfg.task.n_classes)]}
    else:
        metrics = {"MAE": mae(pred, data.y)}
    write_json({"partition": opts["partition"], "metrics": metrics,
                "predictions": [[k[0], k[1], float(p)] for k, p in zip(data.keys, pred)]}, out / "metrics.json")
    return {"command": "eval", "inputs": {**hashes, "checkpoint": sha256_file(Path(opts["checkpoint"]) / "params.bin")},
            "partition": opts["partition"], "metrics": metrics,
            "outputs": {"metrics.json": sha256_file(out / "metrics.json")}}


def cmd_compare(opts: dict) -> dict:
    out = _out(opts)
    _need(opts, "baseline", "challenger")
    base = TrialTable.load(opts["baseline"])
    chal = TrialTable.load(opts["challenger"])
    rep = bootstrap_compare(base, chal, B=opts["B"], seed=opts["seed"])
    save_report(rep, out / "bootstrap.json")
    metric = "MA(4)" if base.maximize else "MAE"
    text = starred_table("comparison (test metric of the best-dev trial)", metric,
                         [("baseline", float(base.best().test_metric.mean()), None),
                          ("challenger", float(chal.best().test_metric.mean()), rep)])
    (out / "comparison.txt").write_text(text + rep.summary() + "\n", encoding="utf-8")
    print(text, end="")
    return {"command": "compare", "B": opts["B"], "seed": opts["seed"],
            "inputs": {"baseline": sha256_file(opts["baseline"]), "challenger": sha256_file(opts["challenger"])},
            "significant": rep.significant, "interval": [rep.low, rep.high],
            "outputs": {n: sha256_file(out / n) for n in ("bootstrap.json", "comparison.txt")}}


def _parse_example(text: str) -> tuple[str, int]:
    cid, sep, turn = text.rpartition(":")
    if not sep or not turn.isdigit():
        raise UsageError(f"--example {text!r}: expected CONV:TURN")
    return cid, int(turn)


def cmd_report(opts: dict) -> dict:
    out = _out(opts)
    model, vocab, _ = _load_model(opts)
    corpus, hashes = _load_corpus(opts, need_partitions=False)
    keys = [_parse_example(e) for e in opts["example"]]
    if not keys:
        conv = corpus.conversations[0]
        keys = [(conv.conversation_id, len(conv))]
    docs = report_for(model, corpus, vocab, keys, opts["format"])
    ext = "html" if opts["format"] == "html" else "txt"
    names = []
    for (cid, ti), doc in zip(keys, docs):
        name = f"report_{cid}_{ti}.{ext}"
        (out / name).write_text(doc, encoding="utf-8")
        names.append(name)
        if ext == "txt":
            print(doc, end="")
    return {"command": "report", "inputs": hashes, "examples": [list(k) for k in keys], "format": opts["format"],
            "outputs": {n: sha256_file(out / n) for n in names}}


def cmd_experiment(opts: dict) -> dict:
    out = _out(opts)
    hyps = tuple(h.strip() for h in str(opts["hypotheses"]).split(",") if h.strip())
    bad = [h for h in hyps if h not in ("h1", "h2", "h3")]
    if bad:
        raise UsageError(f"unknown hypotheses: {', '.join(bad)}")
    cfg = DeskConfig(n_conversations=opts["n_conversations"], turns_per_conv=opts["turns"], budget=opts["budget"],
                     max_epochs=opts["max_epochs"], master_seed=opts["master_seed"], bootstrap_B=opts["B"])
    run_desk_experiments(cfg, out, hyps, log=lambda s: print(s, file=sys.stderr))
    print((out / "tables.txt").read_text(encoding="utf-8"), end="")
    return None  # the harness writes its own manifest


COMMANDS = {
    "generate": cmd_generate, "prepare": cmd_prepare, "tune": cmd_tune, "train": cmd_train,
    "eval": cmd_eval, "compare": cmd_compare, "report": cmd_report, "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = resolve(args)
        manifest = COMMANDS[args.command](opts)
        if manifest is not None:
            write_json(manifest, Path(opts["out"]) / "manifest.json")
    except (UsageError, CorpusError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"hanrock: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, ad.NonFiniteError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"hanrock: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
