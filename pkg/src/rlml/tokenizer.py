"""Byte-level BPE tokenizer: training, encoding/decoding and JSON serialization.

Token id layout is fixed: 0=UNK, 1=BOS, 2=EOS, 3=PAD, ids 4..259 are the 256
raw byte values, and every merge appends one id after that. A trained model
is identified by a SHA-256 fingerprint over its canonical serialization.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import os
from collections import Counter
from dataclasses import dataclass, field

from .errors import DataError

UNK_ID = 0
BOS_ID = 1
EOS_ID = 2
PAD_ID = 3
SPECIAL_TOKENS = {"unk": UNK_ID, "bos": BOS_ID, "eos": EOS_ID, "pad": PAD_ID}
NUM_SPECIALS = 4
BASE_VOCAB_SIZE = NUM_SPECIALS + 256

TOKENIZER_FORMAT_VERSION = 1


def _byte_id(b: int) -> int:
    return NUM_SPECIALS + b


@dataclass
class TokenizerModel:
    """Immutable trained tokenizer: byte-string vocab plus ordered merges."""

    vocab: dict[bytes, int]
    merges: list[tuple[bytes, bytes]]
    vocab_size: int
    fingerprint: str
    # derived lookup tables, built once in from_merges
    _id_to_bytes: list[bytes] = field(repr=False, default_factory=list)
    _pair_table: dict[tuple[int, int], tuple[int, int]] = field(
        repr=False, default_factory=dict
    )

    @classmethod
    def from_merges(cls, merges: list[tuple[bytes, bytes]]) -> "TokenizerModel":
        """Build the full model from an ordered merge list.

        Ids are assigned deterministically: specials, then bytes, then one id
        per merge in order. Each merge must reference byte-strings already in
        the vocabulary at its position in the list.
        """
        vocab: dict[bytes, int] = {bytes([b]): _byte_id(b) for b in range(256)}
        id_to_bytes = [b""] * NUM_SPECIALS + [bytes([b]) for b in range(256)]
        pair_table: dict[tuple[int, int], tuple[int, int]] = {}
        for rank, (left, right) in enumerate(merges):
            if left not in vocab:
                raise DataError(
                    f"merges[{rank}]: left side {left!r} is not a known token"
                )
            if right not in vocab:
                raise DataError(
                    f"merges[{rank}]: right side {right!r} is not a known token"
                )
            merged = left + right
            if merged in vocab:
                raise DataError(
                    f"merges[{rank}]: produces duplicate token {merged!r}"
                )
            new_id = BASE_VOCAB_SIZE + rank
            vocab[merged] = new_id
            id_to_bytes.append(merged)
            pair_table[(vocab[left], vocab[right])] = (rank, new_id)
        size = BASE_VOCAB_SIZE + len(merges)
        fp = _fingerprint(merges, size)
        return cls(vocab, list(merges), size, fp, id_to_bytes, pair_table)


def _fingerprint(merges: list[tuple[bytes, bytes]], vocab_size: int) -> str:
    canonical = json.dumps(
        {
            "version": TOKENIZER_FORMAT_VERSION,
            "vocab_size": vocab_size,
            "specials": SPECIAL_TOKENS,
            "merges": [[l.hex(), r.hex()] for l, r in merges],
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("ascii")).hexdigest()


def train_bpe(corpus, vocab_size: int) -> TokenizerModel:
    """Train byte-level BPE by greedy most-frequent-pair merging.

    Each round merges the adjacent pair with the highest occurrence count
    across the corpus; ties are broken by the lexicographically smaller left
    byte-string, then right. Stops when vocab_size is reached or no pair
    occurs at least twice. Candidate pairs whose concatenation already equals
    an existing token are never selected, so token byte-strings stay unique.
    """
    if vocab_size < BASE_VOCAB_SIZE:
        raise DataError(
            f"vocab_size {vocab_size} below minimum {BASE_VOCAB_SIZE} "
            f"({NUM_SPECIALS} specials + 256 bytes)"
        )
    docs = [doc.text for doc in corpus.documents]
    if not docs:
        raise DataError("cannot train tokenizer on an empty corpus")

    seqs = [[_byte_id(b) for b in text.encode("utf-8")] for text in docs]
    id_to_bytes = [b""] * NUM_SPECIALS + [bytes([b]) for b in range(256)]
    vocab_bytes = set(id_to_bytes[NUM_SPECIALS:])

    pair_counts: Counter[tuple[int, int]] = Counter()
    pair_docs: dict[tuple[int, int], set[int]] = {}
    for di, seq in enumerate(seqs):
        for pair in zip(seq, seq[1:]):
            pair_counts[pair] += 1
            pair_docs.setdefault(pair, set()).add(di)

    merges: list[tuple[bytes, bytes]] = []
    while BASE_VOCAB_SIZE + len(merges) < vocab_size:
        best = None
        best_key = None
        for pair, count in pair_counts.items():
            if count < 2:
                continue
            if id_to_bytes[pair[0]] + id_to_bytes[pair[1]] in vocab_bytes:
                continue
            key = (-count, id_to_bytes[pair[0]], id_to_bytes[pair[1]])
            if best_key is None or key < best_key:
                best, best_key = pair, key
        if best is None:
            break

        left, right = best
        merged_bytes = id_to_bytes[left] + id_to_bytes[right]
        new_id = BASE_VOCAB_SIZE + len(merges)
        merges.append((id_to_bytes[left], id_to_bytes[right]))
        id_to_bytes.append(merged_bytes)
        vocab_bytes.add(merged_bytes)

        for di in sorted(pair_docs.get(best, ())):
            seqs[di] = _apply_merge(
                seqs[di], left, right, new_id, pair_counts, pair_docs, di
            )
        pair_counts.pop(best, None)
        pair_docs.pop(best, None)

    return TokenizerModel.from_merges(merges)


def _apply_merge(seq, left, right, new_id, pair_counts, pair_docs, di):
    """One left-to-right replacement pass, updating pair counts in place."""
    out: list[int] = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == left and seq[i + 1] == right:
            pair_counts[(left, right)] -= 1
            if out:
                prev = out[-1]
                _dec(pair_counts, (prev, left))
                _inc(pair_counts, pair_docs, (prev, new_id), di)
            if i + 2 < n:
                nxt = seq[i + 2]
                _dec(pair_counts, (right, nxt))
                _inc(pair_counts, pair_docs, (new_id, nxt), di)
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def _dec(counts, pair):
    counts[pair] -= 1
    if counts[pair] <= 0:
        del counts[pair]


def _inc(counts, docs, pair, di):
    counts[pair] += 1
    docs.setdefault(pair, set()).add(di)


def encode(tok: TokenizerModel, text: str) -> list[int]:
    """Encode text to token ids: UTF-8 bytes, then merges in training order.

    No BOS/EOS are added. Uses a heap over merge ranks; because token
    byte-strings are unique, applying the lowest-ranked pair present first is
    exactly equivalent to one replacement pass per merge in training order.
    """
    ids = [_byte_id(b) for b in text.encode("utf-8")]
    n = len(ids)
    if n < 2 or not tok._pair_table:
        return ids

    table = tok._pair_table
    nxt = list(range(1, n)) + [-1]
    prv = [-1] + list(range(n - 1))
    alive = [True] * n

    heap = []
    for i in range(n - 1):
        hit = table.get((ids[i], ids[i + 1]))
        if hit is not None:
            heap.append((hit[0], i))
    heapq.heapify(heap)

    while heap:
        rank, i = heapq.heappop(heap)
        if not alive[i]:
            continue
        j = nxt[i]
        if j == -1:
            continue
        hit = table.get((ids[i], ids[j]))
        if hit is None or hit[0] != rank:
            continue  # stale entry, the pair at i changed since the push
        ids[i] = hit[1]
        alive[j] = False
        nj = nxt[j]
        nxt[i] = nj
        if nj != -1:
            prv[nj] = i
        p = prv[i]
        if p != -1:
            hit2 = table.get((ids[p], ids[i]))
            if hit2 is not None:
                heapq.heappush(heap, (hit2[0], p))
        if nj != -1:
            hit2 = table.get((ids[i], ids[nj]))
            if hit2 is not None:
                heapq.heappush(heap, (hit2[0], i))

    return [ids[i] for i in range(n) if alive[i]]


def decode(tok: TokenizerModel, ids) -> str:
    """Decode ids to text; special ids (0..3) are dropped, bad UTF-8 becomes U+FFFD."""
    parts = []
    for tid in ids:
        tid = int(tid)
        if tid < 0 or tid >= tok.vocab_size:
            raise DataError(f"token id {tid} out of range (vocab_size {tok.vocab_size})")
        if tid < NUM_SPECIALS:
            continue
        parts.append(tok._id_to_bytes[tid])
    return b"".join(parts).decode("utf-8", errors="replace")


def save_tokenizer(tok: TokenizerModel, path) -> None:
    payload = {
        "version": TOKENIZER_FORMAT_VERSION,
        "vocab_size": tok.vocab_size,
        "specials": SPECIAL_TOKENS,
        "merges": [[l.hex(), r.hex()] for l, r in tok.merges],
        "fingerprint": tok.fingerprint,
    }
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_tokenizer(path) -> TokenizerModel:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"tokenizer file is not valid JSON: {exc}") from exc

    for fld in ("version", "vocab_size", "specials", "merges", "fingerprint"):
        if fld not in payload:
            raise DataError(f"tokenizer file missing field '{fld}'")
    if payload["version"] != TOKENIZER_FORMAT_VERSION:
        raise DataError(f"unsupported tokenizer version {payload['version']!r}")
    if payload["specials"] != SPECIAL_TOKENS:
        raise DataError("tokenizer field 'specials' does not match the fixed id layout")

    merges = []
    for i, entry in enumerate(payload["merges"]):
        try:
            left, right = bytes.fromhex(entry[0]), bytes.fromhex(entry[1])
        except (ValueError, IndexError, TypeError) as exc:
            raise DataError(f"merges[{i}]: not a hex-encoded pair") from exc
        merges.append((left, right))

    tok = TokenizerModel.from_merges(merges)
    if tok.vocab_size != payload["vocab_size"]:
        raise DataError(
            f"vocab_size {payload['vocab_size']} inconsistent with "
            f"{len(merges)} merges (expected {tok.vocab_size})"
        )
    if tok.fingerprint != payload["fingerprint"]:
        raise DataError("fingerprint does not match tokenizer contents")
    return tok
