"""Overall attention weights, z-score buckets and conversation-analysis reports."""

from __future__ import annotations

import html
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import STATE_NAMES, UNK, Corpus, TaskKind, Vocabulary, build_context_window, tokenize
from .models import AttentionRecord, HanModel

BUCKETS = ("N", "L", "M", "H")
_THRESHOLDS = (0.0, 1.0, 2.0)
# font scale and opacity per bucket for the html report
_HTML_STYLE = {"N": (100, 0.45), "L": (110, 0.65), "M": (130, 0.85), "H": (160, 1.0)}


@dataclass
class AggregatedAttention:
    """Per-example overall weights: talkturns (B, L) and words (B, L, T)."""

    turn: np.ndarray
    word: np.ndarray
    turn_mask: np.ndarray
    word_mask: np.ndarray


def _renorm(w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    w = np.where(mask, w, 0.0)
    s = w.sum(axis=-1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w), where=s > 0)


def aggregate(record: AttentionRecord) -> AggregatedAttention:
    """Mix task-level talkturn and branch-level word attention by the task weights.

    Talkturn weight i is sum_c alpha_c * alpha_(c)i.  Word weights mix the
    primary and auxiliary word encoders by their task mass (alpha of the
    primary task versus the summed alpha of the sixteen auxiliary tasks).
    Both are renormalised over present talkturns / tokens.  A flat record has
    a single task, so aggregation returns its weights unchanged.
    """
    turn = np.asarray(record.turn, dtype=np.float64)
    tmask = np.asarray(record.turn_mask, dtype=bool)
    wmask = np.asarray(record.word_mask, dtype=bool)
    if record.task is None:
        if "shared" not in record.word or turn.shape[0] != 1:
            raise ValueError("flat record needs one talkturn family and shared word attention")
        return AggregatedAttention(_renorm(turn[0], tmask), _renorm(np.asarray(record.word["shared"], np.float64), wmask),
                                   tmask, wmask)
    for branch in ("primary", "aux"):
        if branch not in record.word:
            raise ValueError(f"record is missing {branch} word attention")
    alpha_c = np.asarray(record.task, dtype=np.float64)          # (n_tasks, B)
    if alpha_c.shape[0] != turn.shape[0]:
        raise ValueError("task attention and talkturn attention disagree on the number of tasks")
    overall_turn = np.einsum("cb,cbl->bl", alpha_c, turn)
    m_pri = alpha_c[0][:, None, None]
    m_aux = alpha_c[1:].sum(axis=0)[:, None, None]
    overall_word = m_pri * np.asarray(record.word["primary"], np.float64) + m_aux * np.asarray(record.word["aux"], np.float64)
    return AggregatedAttention(_renorm(overall_turn, tmask), _renorm(overall_word, wmask), tmask, wmask)


def zscore(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    sd = w.std()
    if w.size == 0 or sd == 0 or not np.isfinite(sd):
        return np.zeros_like(w)
    return (w - w.mean()) / sd


def bucket_from_z(z: float) -> str:
    """N below 0, L on [0, 1), M on [1, 2), H from 2; boundaries go to the higher bucket."""
    return BUCKETS[int(np.searchsorted(_THRESHOLDS, z, side="right"))]


def zscore_bucket(weights: Sequence[float]) -> list[str]:
    """N for z < 0, L for 0 <= z < 1, M for 1 <= z < 2, H for z >= 2 (population sd).

    Constant weights all map to N.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        return []
    if w.std() == 0:
        return ["N"] * w.size
    z = zscore(w)
    return [bucket_from_z(v) for v in z]


@dataclass
class ReportExample:
    """One window to render: talkturn numbers and their tokens, oldest first."""

    conversation_id: str
    turn_index: int
    turns: list                 # [(turn number, [tokens])]
    label: object

    @property
    def offsets(self) -> list[int]:
        return [self.turn_index - n for n, _ in self.turns]


def bucket_example(agg: AggregatedAttention, b: int, example: ReportExample) -> tuple[list[str], list[list[str]]]:
    """Talkturn buckets and per-talkturn word buckets for batch row ``b``."""
    L = agg.turn.shape[1]
    slots = [L - 1 - k for k in example.offsets]
    turn_buckets = zscore_bucket(agg.turn[b, slots])
    word_buckets = []
    for slot, (_, toks) in zip(slots, example.turns):
        word_buckets.append(zscore_bucket(agg.word[b, slot, :len(toks)]))
    return turn_buckets, word_buckets


def _label_text(value, task: TaskKind) -> str:
    if task.is_classification:
        v = int(value)
        name = STATE_NAMES[v] if task.n_classes == len(STATE_NAMES) else str(v)
        return name
    return f"{float(value):.3f}"


def render(example: ReportExample, prediction, buckets: tuple[list[str], list[list[str]]], task: TaskKind,
           fmt: str = "text") -> str:
    """Text or self-contained html report for one window."""
    turn_buckets, word_buckets = buckets
    if len(turn_buckets) != len(example.turns) or any(
            len(wb) != len(toks) for wb, (_, toks) in zip(word_buckets, example.turns)):
        raise ValueError("buckets do not align with the example's talkturns and tokens")
    head = (f"conversation {example.conversation_id}, talkturn {example.turn_index}: "
            f"predicted {_label_text(prediction, task)} | true {_label_text(example.label, task)}")
    if fmt == "text":
        lines = [head]
        for (_, toks), k, tb, wb in zip(example.turns, example.offsets, turn_buckets, word_buckets):
            words = " ".join(f"{t}[{b}]" if b in ("M", "H") else t for t, b in zip(toks, wb))
            lines.append(f"[{tb}] i-{k}: {words}")
        lines.append("buckets: N none, L low, M medium, H high")
        return "\n".join(lines) + "\n"
    if fmt != "html":
        raise ValueError(f"unknown format {fmt!r}")
    rows = []
    for (_, toks), k, tb, wb in zip(example.turns, example.offsets, turn_buckets, word_buckets):
        spans = " ".join(
            f'<span style="font-size:{_HTML_STYLE[b][0]}%;opacity:{_HTML_STYLE[b][1]}">{html.escape(t)}</span>'
            for t, b in zip(toks, wb))
        rows.append(f'<p><span style="border:1px solid #000;padding:0 4px;margin-right:6px">{tb}</span>'
                    f'i-{k}: {spans}</p>')
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>attention report</title></head>"
            f"<body style=\"font-family:sans-serif\">\n<h3>{html.escape(head)}</h3>\n" + "\n".join(rows)
            + "\n<p>N: None, L: Low, M: Medium, H: High</p>\n</body></html>\n")


def make_example(corpus: Corpus, conversation_id: str, turn_index: int, L: int, T: int,
                 vocab: Vocabulary | None = None) -> ReportExample:
    conv = next((c for c in corpus.conversations if c.conversation_id == conversation_id), None)
    if conv is None:
        raise KeyError(f"unknown conversation {conversation_id!r}")
    if not 1 <= turn_index <= len(conv):
        raise IndexError(f"turn index {turn_index} out of range 1..{len(conv)}")
    turns = []
    for n in range(max(1, turn_index - L + 1), turn_index + 1):
        toks = tokenize(conv.turns[n - 1].narrative)[:T] or [vocab.tokens[UNK] if vocab else "<unk>"]
        turns.append((n, toks))
    return ReportExample(conversation_id, turn_index, turns, conv.turns[turn_index - 1].label)


def report_for(model: HanModel, corpus: Corpus, vocab: Vocabulary, keys: Sequence[tuple[str, int]],
               fmt: str = "text") -> list[str]:
    """Forward the chosen talkturns and render one document per key."""
    cfg = model.cfg
    examples = [make_example(corpus, cid, ti, cfg.L, cfg.T, vocab) for cid, ti in keys]
    convs = {c.conversation_id: c for c in corpus.conversations}
    ids = np.stack([build_context_window(convs[cid], ti, cfg.L, cfg.T, vocab)[0] for cid, ti in keys])
    preds, record = model.forward(ids, train=False)
    agg = aggregate(record)
    out = preds.primary_numpy()
    docs = []
    for b, ex in enumerate(examples):
        pred = int(out[b].argmax()) if cfg.task.is_classification else float(np.clip(out[b], *cfg.task.target_range))
        docs.append(render(ex, pred, bucket_example(agg, b, ex), cfg.task, fmt))
    return docs
