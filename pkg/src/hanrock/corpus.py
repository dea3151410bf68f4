"""Narrative conversations: data model, JSON-Lines I/O, windows and synthetic data."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PARTITIONS = ("train", "dev", "test")
PAD, UNK = 0, 1
AU_NAMES = ("au05", "au17", "au20", "au25")
PROSODY_NAMES = ("tone_happy", "tone_sad", "tone_angry", "tone_fear")
_STRIP = '.,!?;:"()'


class CorpusError(ValueError):
    """Malformed corpus, manifest or talkturn."""


@dataclass(frozen=True)
class TaskKind:
    """Primary task type: 4-way (default) classification or bounded regression."""

    kind: str
    n_classes: int = 4
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "regression" and not self.lo < self.hi:
            raise ValueError("regression range needs lo < hi")

    @classmethod
    def classification(cls, n_classes: int = 4) -> "TaskKind":
        return cls("classification", n_classes=n_classes)

    @classmethod
    def regression(cls, lo: float, hi: float) -> "TaskKind":
        return cls("regression", lo=float(lo), hi=float(hi))

    @classmethod
    def parse(cls, text: str) -> "TaskKind":
        """``classification`` or ``regression:LO:HI``."""
        head, *rest = text.split(":")
        if head == "classification":
            return cls.classification(int(rest[0]) if rest else 4)
        if head == "regression":
            lo, hi = (float(v) for v in rest) if rest else (1.0, 5.0)
            return cls.regression(lo, hi)
        raise ValueError(f"cannot parse task kind {text!r}")

    def __str__(self):
        if self.is_classification:
            return "classification" if self.n_classes == 4 else f"classification:{self.n_classes}"
        return f"regression:{self.lo:g}:{self.hi:g}"

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"

    @property
    def target_range(self) -> tuple[float, float]:
        """Range of scaled percentile targets for this primary task."""
        return (0.0, 1.0) if self.is_classification else (self.lo, self.hi)

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.is_classification else 1

    def check_label(self, label) -> float | int:
        if self.is_classification:
            if isinstance(label, bool) or not float(label).is_integer():
                raise CorpusError(f"class label must be an integer, got {label!r}")
            label = int(label)
            if not 0 <= label < self.n_classes:
                raise CorpusError(f"class label {label} outside [0, {self.n_classes})")
            return label
        label = float(label)
        if not self.lo <= label <= self.hi:
            raise CorpusError(f"label {label} outside declared range [{self.lo}, {self.hi}]")
        return label


@dataclass(frozen=True)
class Talkturn:
    conversation_id: str
    turn_index: int
    speaker_id: str
    narrative: str
    label: float | int
    au: tuple[float, float, float, float]
    prosody: tuple[float, float, float, float]

    def to_json(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "turn_index": self.turn_index,
            "speaker_id": self.speaker_id,
            "narrative": self.narrative,
            "label": self.label,
            "au": list(self.au),
            "prosody": list(self.prosody),
        }


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    turns: tuple[Talkturn, ...]

    def __len__(self):
        return len(self.turns)

    @property
    def labels(self) -> list:
        return [t.label for t in self.turns]

    @property
    def speakers(self) -> set[str]:
        return {t.speaker_id for t in self.turns}


@dataclass(frozen=True)
class Corpus:
    conversations: tuple[Conversation, ...]
    task: TaskKind
    partitions: Mapping[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.conversations)

    def __eq__(self, other):
        return (isinstance(other, Corpus) and self.conversations == other.conversations
                and self.task == other.task and dict(self.partitions) == dict(other.partitions))

    def __hash__(self):
        return hash((self.conversations, self.task))

    @property
    def n_turns(self) -> int:
        return sum(len(c) for c in self.conversations)

    def turns(self, partition: str | None = None) -> list[Talkturn]:
        return [t for c in self.in_partition(partition) for t in c.turns]

    def in_partition(self, partition: str | None) -> list[Conversation]:
        if partition is None:
            return list(self.conversations)
        if not self.partitions:
            raise CorpusError("corpus has no partition assignment")
        return [c for c in self.conversations if self.partitions.get(c.conversation_id) == partition]

    def partition_of(self, conversation_id: str) -> str | None:
        return self.partitions.get(conversation_id)


# ---------------------------------------------------------------------------
# I/O

_REQUIRED = ("conversation_id", "turn_index", "speaker_id", "narrative", "label", "au", "prosody")


def _talkturn_from_json(obj: dict, task: TaskKind, where: str) -> Talkturn:
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise CorpusError(f"{where}: missing field(s) {', '.join(missing)}")
    au, prosody = obj["au"], obj["prosody"]
    if len(au) != 4 or len(prosody) != 4:
        raise CorpusError(f"{where}: au and prosody need exactly 4 values")
    narrative = str(obj["narrative"])
    if not narrative.strip():
        raise CorpusError(f"{where}: empty narrative")
    turn_index = obj["turn_index"]
    if isinstance(turn_index, bool) or int(turn_index) != turn_index or turn_index < 1:
        raise CorpusError(f"{where}: turn_index must be a positive integer")
    try:
        label = task.check_label(obj["label"])
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None
    return Talkturn(str(obj["conversation_id"]), int(turn_index), str(obj["speaker_id"]), narrative,
                    label, tuple(float(v) for v in au), tuple(float(v) for v in prosody))


def assemble(turns: Iterable[Talkturn], task: TaskKind, partitions: Mapping[str, str] | None = None) -> Corpus:
    """Group talkturns into conversations ordered by turn index.

    Conversations keep first-appearance order.  Turn indices must be unique
    and contiguous from 1 within each conversation.
    """
    grouped: dict[str, dict[int, Talkturn]] = {}
    for t in turns:
        conv = grouped.setdefault(t.conversation_id, {})
        if t.turn_index in conv:
            raise CorpusError(f"duplicate talkturn ({t.conversation_id!r}, {t.turn_index})")
        conv[t.turn_index] = t
    conversations = []
    for cid, by_index in grouped.items():
        order = sorted(by_index)
        if order != list(range(1, len(order) + 1)):
            raise CorpusError(f"conversation {cid!r}: turn indices not contiguous from 1")
        conversations.append(Conversation(cid, tuple(by_index[i] for i in order)))
    return Corpus(tuple(conversations), task, dict(partitions or {}))


def parse_corpus(path, task: TaskKind) -> Corpus:
    turns = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            turns.append(_talkturn_from_json(obj, task, f"{path}:{lineno}"))
    return assemble(turns, task)


def serialize_corpus(corpus: Corpus, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for t in corpus.turns():
            fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")


def read_manifest(path) -> dict[str, list[str]]:
    with open(Path(path), encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise CorpusError("partition manifest must be a JSON object")
    return {k: list(v) for k, v in data.items()}


def write_manifest(manifest: Mapping[str, Sequence[str]], path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        json.dump({k: list(manifest.get(k, [])) for k in PARTITIONS}, fh, indent=2)
        fh.write("\n")


def split_partitions(corpus: Corpus, manifest: Mapping[str, Sequence[str]]) -> Corpus:
    """Attach a train/dev/test assignment and verify speaker disjointness."""
    assignment: dict[str, str] = {}
    for part, ids in manifest.items():
        if part not in PARTITIONS:
            raise CorpusError(f"unknown partition {part!r}")
        for cid in ids:
            if cid in assignment:
                raise CorpusError(f"conversation {cid!r} assigned to {assignment[cid]} and {part}")
            assignment[cid] = part
    known = {c.conversation_id for c in corpus.conversations}
    unassigned = [cid for cid in known if cid not in assignment]
    if unassigned:
        raise CorpusError(f"unassigned conversation(s): {', '.join(sorted(unassigned))}")
    speaker_part: dict[str, str] = {}
    for conv in corpus.conversations:
        part = assignment[conv.conversation_id]
        for spk in conv.speakers:
            prev = speaker_part.setdefault(spk, part)
            if prev != part:
                raise CorpusError(f"speaker {spk!r} appears in both {prev} and {part}")
    return replace(corpus, partitions={cid: p for cid, p in assignment.items() if cid in known})


def make_manifest(corpus: Corpus, fractions=(0.6, 0.2, 0.2)) -> dict[str, list[str]]:
    """Deterministic conversation-level split in corpus order."""
    ids = [c.conversation_id for c in corpus.conversations]
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_dev = min(max(n_dev, 1), n - n_train - 1)
    return {"train": ids[:n_train], "dev": ids[n_train:n_train + n_dev], "test": ids[n_train + n_dev:]}


# ---------------------------------------------------------------------------
# text


def tokenize(narrative: str) -> list[str]:
    tokens = (tok.strip(_STRIP) for tok in narrative.lower().split())
    return [t for t in tokens if t]


class Vocabulary:
    """Token ids: 0 is padding, 1 unknown, then train tokens by descending count."""

    def __init__(self, tokens: Sequence[str], counts: Mapping[str, int] | None = None):
        self.tokens = ["<pad>", "<unk>"] + [t for t in tokens if t not in ("<pad>", "<unk>")]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.counts = dict(counts or {})

    @classmethod
    def build(cls, corpus: Corpus, partition: str | None = "train", min_count: int = 1) -> "Vocabulary":
        if partition is not None and not corpus.partitions:
            partition = None
        counts = Counter(tok for t in corpus.turns(partition) for tok in tokenize(t.narrative))
        kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls(kept, {t: counts[t] for t in kept})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def to_json(self) -> dict:
        return {"tokens": self.tokens[2:], "counts": self.counts}

    @classmethod
    def from_json(cls, data: Mapping) -> "Vocabulary":
        return cls(data["tokens"], data.get("counts"))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.tokens).encode("utf-8")).hexdigest()


def build_context_window(conv: Conversation, i: int, L: int, T: int, vocab: Vocabulary
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Token-id grid (L, T) and mask for talkturn ``i`` (1-based) with context.

    Slot ``L - 1`` holds talkturn ``i``; earlier slots hold its predecessors,
    and slots before the start of the conversation are fully masked.  Each
    talkturn keeps its first ``T`` tokens.
    """
    if not 1 <= i <= len(conv):
        raise IndexError(f"turn index {i} out of range 1..{len(conv)}")
    if L < 1 or T < 1:
        raise ValueError("L and T must be >= 1")
    ids = np.zeros((L, T), dtype=np.int64)
    for slot in range(L):
        turn = i - (L - 1 - slot)
        if turn < 1:
            continue
        row = vocab.encode(tokenize(conv.turns[turn - 1].narrative))[:T] or [UNK]
        ids[slot, :len(row)] = row
    return ids, ids != PAD


# ---------------------------------------------------------------------------
# synthetic data

STATE_NAMES = ("angry", "happy", "neutral", "sad")
CUE_WORDS = ("angrily", "happily", "calmly", "sadly")
SELF_TRANSITION = 0.6
# per-state Gaussian means; rows follow STATE_NAMES
AU_MEANS = np.array([
    [1.5, 1.2, 0.8, 0.6],
    [0.6, 0.4, 0.5, 1.6],
    [0.5, 0.5, 0.5, 0.5],
    [0.3, 1.4, 1.1, 0.4],
])
AU_SD = 0.5
PROSODY_MEANS = np.array([
    # happy, sad, angry, fear
    [0.10, 0.10, 0.60, 0.20],
    [0.60, 0.10, 0.10, 0.10],
    [0.25, 0.25, 0.20, 0.15],
    [0.10, 0.60, 0.10, 0.20],
])
PROSODY_SD = 0.15
# regression label mean per state, as a fraction of the label range
REGRESSION_POSITION = np.array([0.2, 0.8, 0.5, 0.35])
REGRESSION_NOISE = 0.3
CONTENT_VOCAB = tuple(f"w{j:03d}" for j in range(200))
CUE_PROBABILITY = 0.8


def generate_synthetic(n_conversations: int, turns_per_conv: int, task: TaskKind | None = None,
                       seed: int = 0) -> Corpus:
    """Seeded corpus driven by a 4-state Markov chain of latent emotions.

    Auxiliary features, the cue adverb and neighbouring labels all carry
    information about the current state.  Each conversation has two speakers
    of its own, so any conversation-level split is speaker-disjoint.
    """
    if n_conversations < 1 or turns_per_conv < 1:
        raise ValueError("n_conversations and turns_per_conv must be >= 1")
    task = task or TaskKind.classification()
    rng = np.random.default_rng(seed)
    n_states = len(STATE_NAMES)
    trans = np.full((n_states, n_states), (1 - SELF_TRANSITION) / (n_states - 1))
    np.fill_diagonal(trans, SELF_TRANSITION)
    turns = []
    for c in range(n_conversations):
        cid = f"conv{c:04d}"
        state = int(rng.integers(n_states))
        for i in range(1, turns_per_conv + 1):
            if i > 1:
                state = int(rng.choice(n_states, p=trans[state]))
            if task.is_classification:
                label = state % task.n_classes
            else:
                mean = task.lo + REGRESSION_POSITION[state] * (task.hi - task.lo)
                label = float(np.clip(mean + rng.normal(0.0, REGRESSION_NOISE), task.lo, task.hi))
            au = AU_MEANS[state] + rng.normal(0.0, AU_SD, size=4)
            prosody = PROSODY_MEANS[state] + rng.normal(0.0, PROSODY_SD, size=4)
            n_words = int(rng.integers(3, 11))
            words = [CONTENT_VOCAB[j] for j in rng.integers(len(CONTENT_VOCAB), size=n_words)]
            if rng.random() < CUE_PROBABILITY:
                words.insert(1, CUE_WORDS[state])
            speaker = f"{cid}-{'AB'[(i - 1) % 2]}"
            turns.append(Talkturn(cid, i, speaker, " ".join(words), label,
                                  tuple(round(float(v), 6) for v in au),
                                  tuple(round(float(v), 6) for v in prosody)))
    return assemble(turns, task)


def encode_windows(corpus: Corpus, vocab: Vocabulary, L: int, T: int, partition: str | None = None
                   ) -> tuple[np.ndarray, list[tuple[str, int]]]:
    """Context windows for every talkturn of ``partition``: ids (n, L, T) and keys."""
    rows, keys = [], []
    for conv in corpus.in_partition(partition):
        encoded = [vocab.encode(tokenize(t.narrative))[:T] or [UNK] for t in conv.turns]
        for i in range(1, len(conv) + 1):
            grid = np.zeros((L, T), dtype=np.int64)
            for slot in range(L):
                turn = i - (L - 1 - slot)
                if turn >= 1:
                    row = encoded[turn - 1]
                    grid[slot, :len(row)] = row
            rows.append(grid)
            keys.append((conv.conversation_id, i))
    ids = np.stack(rows) if rows else np.zeros((0, L, T), dtype=np.int64)
    return ids, keys
