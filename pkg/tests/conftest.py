"""Shared test helpers: synthetic corpora, rigged models, gradient checking."""

from __future__ import annotations

import numpy as np
import pytest

from rlml.corpus import Corpus, Document, QAPair
from rlml.model import ModelConfig, ModelParams, expected_shapes, init_model, loss_and_grad
from rlml.tokenizer import TokenizerModel

def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    status = "PASS" if report.passed else "FAIL"
    print(f"\n[ACCEPTANCE] {name}: {status}", flush=True)


SYL_A = ["vil", "lap", "beb", "ez", "stir", "sern", "bars", "kisk"]
SYL_B = ["kas", "ras", "unas", "enis", "ukas", "ynas"]
NOUNS = [a + b for a in SYL_A for b in SYL_B]
COLORS = ["raudonas", "zalias", "melynas", "geltonas", "baltas", "juodas", "pilkas", "rudas"]
VERBS = ["mato", "seka", "lenkia", "kviecia"]


def color_of(noun: str) -> str:
    return COLORS[NOUNS.index(noun) % len(COLORS)]


def qa_unit(noun: str) -> str:
    return f"kokia spalva yra {noun}? {noun} yra {color_of(noun)}."


def make_word_corpus(n_docs: int, seed: int) -> Corpus:
    """Template-grammar corpus with a learnable noun -> color mapping."""
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_docs):
        parts = []
        for _ in range(int(rng.integers(5, 10))):
            noun = NOUNS[int(rng.integers(0, len(NOUNS)))]
            if rng.random() < 0.6:
                parts.append(qa_unit(noun))
            else:
                other = NOUNS[int(rng.integers(0, len(NOUNS)))]
                verb = VERBS[int(rng.integers(0, len(VERBS)))]
                parts.append(f"{noun} {verb} {other}.")
        docs.append(Document(f"doc-{i}", " ".join(parts)))
    return Corpus(tuple(docs))


def make_word_qa() -> list[QAPair]:
    return [
        QAPair(f"kokia spalva yra {n}?", f"{n} yra {color_of(n)}.") for n in NOUNS
    ]


def byte_tokenizer() -> TokenizerModel:
    """Merge-free tokenizer: 4 specials + 256 bytes."""
    return TokenizerModel.from_merges([])


def make_bigram_params(
    config: ModelConfig, mapping: dict[int, int], boost: float = 12.0
) -> ModelParams:
    """A model that deterministically emits mapping[t] after token t.

    Attention and MLP outputs are zeroed so the residual stream carries the
    embedding through unchanged; mapped tokens get one-hot embeddings whose
    output-head rows put `boost` mass on the target id. Tokens outside the
    mapping produce uniform logits. Sources sharing a target share a slot, so
    the number of distinct targets must be at most `dim`.
    """
    params = init_model(config, seed=0)
    for name in params.tensors:
        if not name.endswith("norm"):
            params.tensors[name] = np.zeros_like(params.tensors[name])
    slot_of_target: dict[int, int] = {}
    emb = params["tok_embedding"]
    head = params["output_head"]
    for src, dst in mapping.items():
        if dst not in slot_of_target:
            slot = len(slot_of_target)
            if slot >= config.dim:
                raise ValueError("bigram mapping needs more slots than dim")
            slot_of_target[dst] = slot
            head[slot, dst] = boost
        emb[src, slot_of_target[dst]] = 1.0
    return params


def gradcheck(
    params64: ModelParams,
    tokens: np.ndarray,
    targets: np.ndarray,
    n_coords: int,
    h: float,
    seed: int = 0,
) -> float:
    """Worst relative error of analytic gradients vs central finite differences."""
    assert params64.dtype == np.float64
    _, grads = loss_and_grad(params64, tokens, targets)
    rng = np.random.default_rng(seed)
    names = list(params64.tensors.keys())
    worst = 0.0
    for _ in range(n_coords):
        name = names[int(rng.integers(0, len(names)))]
        arr = params64.tensors[name]
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        lp, _ = loss_and_grad(params64, tokens, targets)
        arr[idx] = orig - h
        lm, _ = loss_and_grad(params64, tokens, targets)
        arr[idx] = orig
        fd = (lp - lm) / (2.0 * h)
        an = grads[name][idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, rel)
    return worst


def perplexity_oracle(params: ModelParams, tok: TokenizerModel, text: str) -> float:
    """Brute-force reference: one fresh forward per prefix, float64 softmax."""
    import math

    from rlml.model import forward
    from rlml.tokenizer import BOS_ID, encode

    ids = [BOS_ID] + encode(tok, text)
    n = len(ids) - 1
    total = 0.0
    for i in range(n):
        row = forward(params, ids[: i + 1])[-1].astype(np.float64)
        row -= row.max()
        probs = np.exp(row) / np.exp(row).sum()
        total += math.log(probs[ids[i + 1]])
    return math.exp(-total / n)


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(vocab_size=260, dim=16, n_layers=2, n_heads=2, context_len=32)


@pytest.fixture(scope="session")
def tiny_params(tiny_config) -> ModelParams:
    return init_model(tiny_config, seed=7)


@pytest.fixture(scope="session")
def btok() -> TokenizerModel:
    return byte_tokenizer()
