"""Corpus and Q/A dataset ingestion, token statistics and block packing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .tokenizer import BOS_ID, EOS_ID, TokenizerModel, encode


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    source: str | None = None


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]

    def __len__(self) -> int:
        return len(self.documents)


@dataclass(frozen=True)
class CorpusStats:
    total_tokens: int
    record_count: int
    mean_tokens_per_record: float
    std_tokens_per_record: float


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str


@dataclass(frozen=True)
class InstructionExample:
    instruction: str
    output: str
    input: str | None = None


def load_corpus(path) -> Corpus:
    """Read a JSONL corpus: one object per line with a required "text" field.

    Optional fields: "id" (auto-assigned "doc-<line#>" when absent) and
    "source". Blank lines are skipped. Malformed lines, empty text after
    trimming, and duplicate ids are rejected with the offending line number.
    """
    documents: list[Document] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed record") from exc
            if not isinstance(record, dict) or "text" not in record:
                raise DataError(f"line {lineno}: missing field 'text'")
            text = record["text"]
            if not isinstance(text, str) or not text.strip():
                raise DataError(f"line {lineno}: empty text")
            doc_id = record.get("id", f"doc-{lineno}")
            doc_id = str(doc_id)
            if doc_id in seen_ids:
                raise DataError(f"line {lineno}: duplicate id '{doc_id}'")
            seen_ids.add(doc_id)
            source = record.get("source")
            documents.append(Document(doc_id, text, source))
    if not documents:
        raise DataError(f"corpus file '{path}' contains no documents")
    return Corpus(tuple(documents))


def corpus_stats(corpus: Corpus, tok: TokenizerModel) -> CorpusStats:
    """Token statistics over all documents, encoded without special tokens.

    Totals are exact integer sums; mean and population standard deviation are
    derived from them, so results are independent of summation order.
    """
    if len(corpus) == 0:
        raise DataError("cannot compute statistics of an empty corpus")
    counts = [len(encode(tok, doc.text)) for doc in corpus.documents]
    n = len(counts)
    total = sum(counts)
    sq_total = sum(c * c for c in counts)
    mean = total / n
    # population variance from exact integer sums: (n*sum(x^2) - sum(x)^2) / n^2
    var = (n * sq_total - total * total) / (n * n)
    return CorpusStats(total, n, mean, math.sqrt(max(var, 0.0)))


def token_counts(corpus: Corpus, tok: TokenizerModel) -> list[int]:
    """Per-document token counts (no specials), in corpus order."""
    return [len(encode(tok, doc.text)) for doc in corpus.documents]


def pack_sequences(corpus: Corpus, tok: TokenizerModel, context_len: int) -> np.ndarray:
    """Pack the corpus into fixed-length training blocks.

    Documents are joined as BOS + encode(text) + EOS into one token stream,
    which is chunked into consecutive blocks of context_len; the trailing
    partial block is dropped. Returns an int32 array [n_blocks, context_len].
    """
    if context_len < 2:
        raise DataError(f"context_len must be >= 2, got {context_len}")
    if len(corpus) == 0:
        raise DataError("cannot pack an empty corpus")
    stream: list[int] = []
    for doc in corpus.documents:
        stream.append(BOS_ID)
        stream.extend(encode(tok, doc.text))
        stream.append(EOS_ID)
    n_blocks = len(stream) // context_len
    if n_blocks == 0:
        raise DataError(
            f"insufficient data: corpus yields {len(stream)} tokens, "
            f"need at least {context_len}"
        )
    arr = np.asarray(stream[: n_blocks * context_len], dtype=np.int32)
    return arr.reshape(n_blocks, context_len)


def load_qa_dataset(path) -> list[QAPair]:
    """Read a JSONL file of {"question": ..., "answer": ...} records."""
    pairs: list[QAPair] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed record") from exc
            for fld in ("question", "answer"):
                if not isinstance(record, dict) or fld not in record:
                    raise DataError(f"line {lineno}: missing field '{fld}'")
                if not isinstance(record[fld], str) or not record[fld].strip():
                    raise DataError(f"line {lineno}: empty '{fld}'")
            pairs.append(QAPair(record["question"], record["answer"]))
    return pairs


def load_instruction_dataset(path) -> list[InstructionExample]:
    """Read JSONL instruction data: instruction/output required, input optional."""
    examples: list[InstructionExample] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed record") from exc
            for fld in ("instruction", "output"):
                if not isinstance(record, dict) or fld not in record:
                    raise DataError(f"line {lineno}: missing field '{fld}'")
                if not isinstance(record[fld], str) or not record[fld].strip():
                    raise DataError(f"line {lineno}: empty '{fld}'")
            raw_input = record.get("input") or None
            examples.append(
                InstructionExample(record["instruction"], record["output"], raw_input)
            )
    return examples


def format_instruction(ex: InstructionExample) -> tuple[str, int]:
    """Render an example to prompt text; returns (text, response char offset).

    The offset marks where the output section begins, for loss masking.
    """
    if ex.input:
        prompt = (
            f"### Instruction:\n{ex.instruction}\n\n"
            f"### Input:\n{ex.input}\n\n### Response:\n"
        )
    else:
        prompt = f"### Instruction:\n{ex.instruction}\n\n### Response:\n"
    return prompt + ex.output, len(prompt)


def qa_to_instruction(pair: QAPair) -> InstructionExample:
    """Adapt a Q/A pair to an instruction example (question in, answer out)."""
    return InstructionExample(instruction=pair.question, output=pair.answer)


def split_holdout(corpus: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Deterministically split off ceil(fraction * n) documents as holdout.

    Both parts keep the original corpus order. The split must leave at least
    one training document.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"holdout fraction must be in (0, 1), got {fraction}")
    n = len(corpus)
    if n < 2:
        raise DataError("corpus must have at least 2 documents to split")
    n_holdout = math.ceil(fraction * n)
    if n_holdout >= n:
        raise DataError(
            f"holdout of {n_holdout} documents would leave an empty training set"
        )
    perm = np.random.default_rng(seed).permutation(n)
    holdout_idx = set(int(i) for i in perm[:n_holdout])
    train_docs = tuple(d for i, d in enumerate(corpus.documents) if i not in holdout_idx)
    holdout_docs = tuple(d for i, d in enumerate(corpus.documents) if i in holdout_idx)
    return Corpus(train_docs), Corpus(holdout_docs)
