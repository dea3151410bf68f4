import json

import numpy as np
import pytest

from hanrock.corpus import (CorpusError, TaskKind, Vocabulary, build_context_window, encode_windows,
                            generate_synthetic, make_manifest, parse_corpus, serialize_corpus,
                            split_partitions, tokenize)


def _row(cid="c1", i=1, spk="a", label=0, narrative="hello there", **kw):
    row = {"conversation_id": cid, "turn_index": i, "speaker_id": spk, "narrative": narrative,
           "label": label, "au": [0, 0, 0, 0], "prosody": [0, 0, 0, 0]}
    row.update(kw)
    return row


def _write(tmp_path, rows):
    path = tmp_path / "c.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_roundtrip(tmp_path):
    corpus = generate_synthetic(3, 4, seed=1)
    serialize_corpus(corpus, tmp_path / "c.jsonl")
    assert parse_corpus(tmp_path / "c.jsonl", corpus.task) == corpus


def test_turns_are_sorted_by_index(tmp_path):
    path = _write(tmp_path, [_row(i=2, narrative="second"), _row(i=1, narrative="first")])
    conv = parse_corpus(path, TaskKind.classification()).conversations[0]
    assert [t.narrative for t in conv.turns] == ["first", "second"]


@pytest.mark.parametrize("bad, message", [
    ({"label": 7}, "outside"),
    ({"label": 1.5}, "integer"),
    ({"narrative": "   "}, "empty narrative"),
    ({"au": [1, 2]}, "exactly 4"),
    ({"turn_index": 0}, "positive integer"),
])
def test_invalid_rows_are_rejected(tmp_path, bad, message):
    with pytest.raises(CorpusError, match=message):
        parse_corpus(_write(tmp_path, [_row(**bad)]), TaskKind.classification())


def test_missing_field_and_gaps(tmp_path):
    row = _row()
    del row["prosody"]
    with pytest.raises(CorpusError, match="missing"):
        parse_corpus(_write(tmp_path, [row]), TaskKind.classification())
    with pytest.raises(CorpusError, match="contiguous"):
        parse_corpus(_write(tmp_path, [_row(i=1), _row(i=3)]), TaskKind.classification())


def test_regression_label_range(tmp_path):
    with pytest.raises(CorpusError):
        parse_corpus(_write(tmp_path, [_row(label=6.0)]), TaskKind.regression(1, 5))


def test_speaker_overlap_across_partitions_is_rejected(tmp_path):
    corpus = parse_corpus(_write(tmp_path, [_row("c1", spk="x"), _row("c2", spk="x")]), TaskKind.classification())
    with pytest.raises(CorpusError, match="speaker"):
        split_partitions(corpus, {"train": ["c1"], "dev": ["c2"], "test": []})
    assert split_partitions(corpus, {"train": ["c1", "c2"]}).partition_of("c2") == "train"


def test_make_manifest_covers_everything_once():
    corpus = generate_synthetic(10, 2, seed=0)
    m = make_manifest(corpus)
    ids = m["train"] + m["dev"] + m["test"]
    assert sorted(ids) == sorted(c.conversation_id for c in corpus.conversations)
    assert (len(m["train"]), len(m["dev"]), len(m["test"])) == (6, 2, 2)


def test_tokenize_and_vocabulary_order():
    assert tokenize("Hello, World! hello") == ["hello", "world", "hello"]
    corpus = generate_synthetic(4, 5, seed=2)
    corpus = split_partitions(corpus, make_manifest(corpus))
    vocab = Vocabulary.build(corpus)
    counts = [vocab.counts[t] for t in vocab.tokens[2:]]
    assert counts == sorted(counts, reverse=True)
    test_only = {tok for t in corpus.turns("test") for tok in tokenize(t.narrative)} - {
        tok for t in corpus.turns("train") for tok in tokenize(t.narrative)}
    assert not test_only & set(vocab.tokens)
    assert Vocabulary.from_json(vocab.to_json()).digest() == vocab.digest()


def test_context_window_pads_before_conversation_start():
    corpus = generate_synthetic(1, 5, seed=3)
    vocab = Vocabulary.build(corpus, None)
    conv = corpus.conversations[0]
    ids, mask = build_context_window(conv, 2, 4, 6, vocab)
    assert not mask[:2].any()
    assert mask[2:, 0].all()
    first = vocab.encode(tokenize(conv.turns[0].narrative))[:6]
    np.testing.assert_array_equal(ids[2, :len(first)], first)


def test_encode_windows_agrees_with_build_context_window():
    corpus = generate_synthetic(2, 6, seed=4)
    vocab = Vocabulary.build(corpus, None)
    ids, keys = encode_windows(corpus, vocab, 3, 5)
    convs = {c.conversation_id: c for c in corpus.conversations}
    for row, (cid, ti) in zip(ids, keys):
        np.testing.assert_array_equal(row, build_context_window(convs[cid], ti, 3, 5, vocab)[0])


def test_synthetic_is_seeded():
    assert generate_synthetic(3, 4, seed=9) == generate_synthetic(3, 4, seed=9)
    assert generate_synthetic(3, 4, seed=9) != generate_synthetic(3, 4, seed=10)
    reg = generate_synthetic(3, 4, TaskKind.regression(1, 5), seed=0)
    assert all(1 <= t.label <= 5 for t in reg.turns())


def test_task_kind_parse_roundtrip():
    for text in ("classification", "regression:1:5", "classification:3"):
        assert str(TaskKind.parse(text)) == text
    with pytest.raises(ValueError):
        TaskKind.parse("ranking")
