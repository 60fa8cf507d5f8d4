"""Corpus ingestion, statistics, packing and split tests."""

import json
import math

import numpy as np
import pytest

from conftest import byte_tokenizer, make_word_corpus
from rlml.corpus import (
    Corpus,
    Document,
    QAPair,
    corpus_stats,
    format_instruction,
    InstructionExample,
    load_corpus,
    load_instruction_dataset,
    load_qa_dataset,
    pack_sequences,
    qa_to_instruction,
    split_holdout,
)
from rlml.errors import DataError
from rlml.tokenizer import BOS_ID, EOS_ID, encode, train_bpe


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r, ensure_ascii=False) for r in rows) + "\n")


# --- load_corpus -----------------------------------------------------------


def test_load_corpus_preserves_order_and_ids(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [{"id": "a", "text": "labas"}, {"id": "b", "text": "rytas"}])
    corpus = load_corpus(path)
    assert [d.id for d in corpus.documents] == ["a", "b"]
    assert [d.text for d in corpus.documents] == ["labas", "rytas"]


def test_load_corpus_assigns_missing_ids_by_line(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [{"text": "x"}, {"text": "y"}])
    corpus = load_corpus(path)
    assert [d.id for d in corpus.documents] == ["doc-1", "doc-2"]


def test_load_corpus_malformed_line_names_line_number(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"text": "a"}\n{"text": "b"}\n{bad\n')
    with pytest.raises(DataError, match="line 3: malformed record"):
        load_corpus(path)


def test_load_corpus_rejects_empty_text(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [{"text": "ok"}, {"text": "  "}])
    with pytest.raises(DataError, match="line 2"):
        load_corpus(path)


def test_load_corpus_rejects_duplicate_ids(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [{"id": "x", "text": "a"}, {"id": "x", "text": "b"}])
    with pytest.raises(DataError, match="duplicate id"):
        load_corpus(path)


def test_load_corpus_rejects_empty_file(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("")
    with pytest.raises(DataError, match="no documents"):
        load_corpus(path)


def test_load_corpus_keeps_source_labels(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [{"text": "a", "source": "wiki"}, {"text": "b"}])
    corpus = load_corpus(path)
    assert corpus.documents[0].source == "wiki"
    assert corpus.documents[1].source is None


# --- corpus_stats ----------------------------------------------------------


def test_stats_on_known_token_counts(btok):
    corpus = Corpus((Document("a", "abc"), Document("b", "abcde")))
    stats = corpus_stats(corpus, btok)
    assert stats.total_tokens == 8
    assert stats.record_count == 2
    assert stats.mean_tokens_per_record == 4.0
    assert stats.std_tokens_per_record == 1.0


def test_stats_single_record(btok):
    stats = corpus_stats(Corpus((Document("a", "abcd"),)), btok)
    assert stats.mean_tokens_per_record == 4.0
    assert stats.std_tokens_per_record == 0.0


def test_stats_empty_corpus_rejected(btok):
    with pytest.raises(DataError, match="empty"):
        corpus_stats(Corpus(()), btok)


def test_stats_match_bruteforce_oracle_on_random_corpora():
    rng = np.random.default_rng(21)
    corpus = make_word_corpus(300, seed=8)
    tok = train_bpe(make_word_corpus(30, seed=9), 330)
    for trial in range(3):
        k = int(rng.integers(2, len(corpus.documents)))
        sub = Corpus(tuple(corpus.documents[:k]))
        stats = corpus_stats(sub, tok)
        counts = np.array([len(encode(tok, d.text)) for d in sub.documents])
        assert stats.total_tokens == int(counts.sum())
        assert stats.record_count == len(counts)
        assert math.isclose(stats.mean_tokens_per_record, counts.mean(), rel_tol=1e-9)
        assert math.isclose(
            stats.std_tokens_per_record, float(np.std(counts)), rel_tol=1e-9, abs_tol=1e-12
        )


def test_stats_are_pure(btok):
    corpus = Corpus((Document("a", "abc"), Document("b", "defgh")))
    assert corpus_stats(corpus, btok) == corpus_stats(corpus, btok)


# --- pack_sequences --------------------------------------------------------


def test_pack_hand_traced_example(btok):
    # bytes 1,2,3 and 4,5 encode to ids 5,6,7 and 8,9
    corpus = Corpus((Document("a", "\x01\x02\x03"), Document("b", "\x04\x05")))
    blocks = pack_sequences(corpus, btok, 4)
    assert blocks.tolist() == [[1, 5, 6, 7], [2, 1, 8, 9]]  # trailing [2] dropped


def test_pack_exact_single_block(btok):
    corpus = Corpus((Document("a", "\x01\x02"),))
    blocks = pack_sequences(corpus, btok, 4)
    assert blocks.shape == (1, 4)
    assert blocks.tolist() == [[BOS_ID, 5, 6, EOS_ID]]


def test_pack_empty_corpus_rejected(btok):
    with pytest.raises(DataError, match="empty"):
        pack_sequences(Corpus(()), btok, 4)


def test_pack_insufficient_data(btok):
    corpus = Corpus((Document("a", "ab"),))
    with pytest.raises(DataError, match="insufficient data"):
        pack_sequences(corpus, btok, 64)


def test_pack_blocks_reproduce_stream_prefix(btok):
    corpus = make_word_corpus(5, seed=3)
    blocks = pack_sequences(corpus, btok, 16)
    stream = []
    for doc in corpus.documents:
        stream += [BOS_ID] + encode(btok, doc.text) + [EOS_ID]
    flat = blocks.reshape(-1).tolist()
    assert flat == stream[: len(flat)]
    assert all(len(b) == 16 for b in blocks)


def test_pack_context_len_bound(btok):
    with pytest.raises(DataError, match="context_len"):
        pack_sequences(Corpus((Document("a", "abc"),)), btok, 1)


# --- qa and instruction data -----------------------------------------------


def test_load_qa_table_example(tmp_path):
    path = tmp_path / "qa.jsonl"
    write_jsonl(
        path,
        [
            {
                "question": "Koks yra Vilniaus miesto statusas Lietuvoje?",
                "answer": "Vilnius yra Lietuvos sostinė.",
            }
        ],
    )
    pairs = load_qa_dataset(path)
    assert len(pairs) == 1
    assert pairs[0].answer.endswith("sostinė.")


def test_load_qa_empty_file_is_valid(tmp_path):
    path = tmp_path / "qa.jsonl"
    path.write_text("")
    assert load_qa_dataset(path) == []


def test_load_qa_missing_field_names_line(tmp_path):
    path = tmp_path / "qa.jsonl"
    write_jsonl(path, [{"question": "a", "answer": "b"}, {"question": "c"}])
    with pytest.raises(DataError, match="line 2: missing field 'answer'"):
        load_qa_dataset(path)


def test_load_instruction_dataset(tmp_path):
    path = tmp_path / "ins.jsonl"
    write_jsonl(
        path,
        [
            {"instruction": "do", "output": "done"},
            {"instruction": "do2", "input": "ctx", "output": "done2"},
        ],
    )
    examples = load_instruction_dataset(path)
    assert examples[0].input is None
    assert examples[1].input == "ctx"


# --- format_instruction ----------------------------------------------------


def test_format_without_input():
    text, offset = format_instruction(InstructionExample("A", "B"))
    assert text == "### Instruction:\nA\n\n### Response:\nB"
    assert text[offset:] == "B"


def test_format_with_input():
    text, offset = format_instruction(InstructionExample("A", "B", "C"))
    assert "### Input:\nC" in text
    assert text[offset:] == "B"


def test_qa_adapter_uses_same_template():
    pair = QAPair("klausimas?", "atsakymas.")
    text, offset = format_instruction(qa_to_instruction(pair))
    assert "### Instruction:\nklausimas?" in text
    assert text[offset:] == "atsakymas."
    assert "### Input:" not in text


# --- split_holdout ---------------------------------------------------------


def test_split_exact_partition():
    corpus = make_word_corpus(10, seed=1)
    train, holdout = split_holdout(corpus, 0.2, seed=5)
    assert len(holdout) == 2 and len(train) == 8
    train_ids = {d.id for d in train.documents}
    holdout_ids = {d.id for d in holdout.documents}
    assert train_ids.isdisjoint(holdout_ids)
    assert train_ids | holdout_ids == {d.id for d in corpus.documents}


def test_split_deterministic():
    corpus = make_word_corpus(10, seed=1)
    a = split_holdout(corpus, 0.3, seed=9)
    b = split_holdout(corpus, 0.3, seed=9)
    assert [d.id for d in a[0].documents] == [d.id for d in b[0].documents]
    assert [d.id for d in a[1].documents] == [d.id for d in b[1].documents]


def test_split_rejects_empty_train():
    corpus = make_word_corpus(2, seed=1)
    with pytest.raises(DataError, match="empty training set"):
        split_holdout(corpus, 0.9, seed=1)


def test_split_rejects_bad_fraction():
    corpus = make_word_corpus(4, seed=1)
    for fraction in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(DataError, match="fraction"):
            split_holdout(corpus, fraction, seed=1)
