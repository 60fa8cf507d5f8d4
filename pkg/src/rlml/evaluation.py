"""Perplexity and benchmark evaluation over trained checkpoints.

Sequence perplexity is exp of the mean negative log-probability of every
token after the BOS prefix. Multiple-choice tasks are scored by conditional
log-likelihood of each choice given the query (plus a token-count-normalized
variant, acc_norm); generative tasks by exact match on the text after the
last "####" marker. All probability sums accumulate in float64 and never
modify model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import QAPair
from .errors import ContextOverflowError, DataError
from .model import ModelParams, forward, greedy_generate
from .tasks import BenchmarkTask, GENERATIVE, MULTIPLE_CHOICE
from .tokenizer import BOS_ID, TokenizerModel, encode
from .train import Checkpoint

ANSWER_MARKER = "####"


@dataclass(frozen=True)
class PerplexityReport:
    per_item: tuple[tuple[str, float], ...]
    average: float
    skipped: int = 0


@dataclass(frozen=True)
class AccuracyReport:
    task: str
    kind: str
    n_items: int
    acc: float
    acc_norm: float | None
    picks: tuple
    skipped: int = 0
    unparseable: int = 0


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    avg_perplexity: float
    tasks: dict


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    task_names: tuple[str, ...]


def _log_softmax_f64(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = (logits - m).astype(np.float64)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def perplexity_from_logits(logits: np.ndarray, ids: list[int]) -> float:
    """exp(-mean log p) for targets ids[1:], given logits for ids[:-1]."""
    logp = _log_softmax_f64(logits)
    picked = logp[np.arange(len(ids) - 1), ids[1:]]
    return float(np.exp(-np.mean(picked)))


def sequence_perplexity(params: ModelParams, tok: TokenizerModel, text: str) -> float:
    """exp(-mean log p(token | prefix)) over all tokens following BOS."""
    ids = [BOS_ID] + encode(tok, text)
    n = len(ids)
    if n < 2:
        raise DataError("sequence too short: needs at least one predicted token")
    if n > params.config.context_len:
        raise ContextOverflowError(
            f"sequence of {n} tokens exceeds context_len {params.config.context_len}"
        )
    return perplexity_from_logits(forward(params, ids[:-1]), ids)


def average_perplexity(
    params: ModelParams, tok: TokenizerModel, qa: list[QAPair]
) -> PerplexityReport:
    """Per-pair perplexity of question + " " + answer, and the arithmetic mean.

    Pairs that do not fit the context window are skipped and counted.
    """
    if not qa:
        raise DataError("no Q/A pairs to evaluate")
    per_item: list[tuple[str, float]] = []
    skipped = 0
    for i, pair in enumerate(qa):
        text = f"{pair.question} {pair.answer}"
        try:
            ppl = sequence_perplexity(params, tok, text)
        except ContextOverflowError:
            skipped += 1
            continue
        per_item.append((f"qa-{i}", ppl))
    if not per_item:
        raise DataError("all Q/A items exceed the context window")
    average = float(np.mean([p for _, p in per_item]))
    return PerplexityReport(tuple(per_item), average, skipped)


def _continuation_score(
    logits: np.ndarray, ids: list[int], n_context: int
) -> tuple[float, int]:
    """Sum of log p over ids[n_context:], given logits for ids[:-1]."""
    logp = _log_softmax_f64(logits)
    positions = np.arange(n_context - 1, len(ids) - 1)
    total = float(np.sum(logp[positions, [ids[p + 1] for p in positions]]))
    return total, len(ids) - n_context


def score_choice(
    params: ModelParams, tok: TokenizerModel, context: str, continuation: str
) -> tuple[float, int]:
    """Conditional log-likelihood of a continuation given its context.

    Continuation tokens are found by prefix-length subtraction: the full text
    is tokenized once and the first len(encode(context)) + 1 positions count
    as context. This is an approximation when a merge crosses the boundary;
    a continuation that vanishes entirely under it is an error.
    """
    full = [BOS_ID] + encode(tok, context + continuation)
    if len(full) > params.config.context_len:
        raise ContextOverflowError(
            f"sequence of {len(full)} tokens exceeds context_len "
            f"{params.config.context_len}"
        )
    n_context = 1 + len(encode(tok, context))
    if len(full) <= n_context:
        raise DataError("continuation empty after tokenization")
    logits = forward(params, full[:-1])
    return _continuation_score(logits, full, n_context)


def pick_indices(scores: list[tuple[float, int]]) -> tuple[int, int]:
    """Argmax picks by raw sum and by per-token mean; ties take the lowest index."""
    pick_acc = 0
    pick_norm = 0
    for j in range(1, len(scores)):
        if scores[j][0] > scores[pick_acc][0]:
            pick_acc = j
        if scores[j][0] / scores[j][1] > scores[pick_norm][0] / scores[pick_norm][1]:
            pick_norm = j
    return pick_acc, pick_norm


def eval_multiple_choice(
    params: ModelParams, tok: TokenizerModel, task: BenchmarkTask
) -> AccuracyReport:
    """Score every choice of every item.

    Items are skipped (and counted) when any choice overflows the context or
    tokenizes to an empty continuation under the boundary rule.
    """
    if task.kind != MULTIPLE_CHOICE:
        raise DataError(f"task '{task.name}' is not multiple_choice")
    picks = []
    correct = 0
    correct_norm = 0
    skipped = 0
    for item in task.items:
        try:
            scores = [
                score_choice(params, tok, item.query, choice) for choice in item.choices
            ]
        except DataError:
            skipped += 1
            continue
        pick_acc, pick_norm = pick_indices(scores)
        picks.append((pick_acc, pick_norm, item.gold))
        correct += int(pick_acc == item.gold)
        correct_norm += int(pick_norm == item.gold)
    if not picks:
        raise DataError(f"task '{task.name}': every item overflowed the context")
    n = len(picks)
    return AccuracyReport(
        task.name, task.kind, n, correct / n, correct_norm / n, tuple(picks), skipped
    )


def extract_answer(text: str, require_marker: bool) -> str | None:
    """Text after the last "####" marker, comma-stripped and trimmed.

    Without a marker: None when the marker is required (model output), the
    whole string otherwise (reference answers may omit it).
    """
    if ANSWER_MARKER in text:
        tail = text.rsplit(ANSWER_MARKER, 1)[1]
    elif require_marker:
        return None
    else:
        tail = text
    return tail.replace(",", "").strip()


def eval_generative(
    params: ModelParams,
    tok: TokenizerModel,
    task: BenchmarkTask,
    max_new_tokens: int,
) -> AccuracyReport:
    """Greedy generation scored by exact match on the extracted final answer."""
    if task.kind != GENERATIVE:
        raise DataError(f"task '{task.name}' is not generative")
    picks = []
    correct = 0
    unparseable = 0
    for item in task.items:
        output = greedy_generate(params, tok, item.query, max_new_tokens)
        pred = extract_answer(output, require_marker=True)
        ref = extract_answer(item.answer, require_marker=False)
        if pred is None:
            unparseable += 1
            ok = False
        else:
            ok = pred == ref
        correct += int(ok)
        picks.append((pred, ok))
    n = len(picks)
    if n == 0:
        raise DataError(f"task '{task.name}' has no items")
    return AccuracyReport(
        task.name, task.kind, n, correct / n, None, tuple(picks), 0, unparseable
    )


def evaluate_task(
    params: ModelParams,
    tok: TokenizerModel,
    task: BenchmarkTask,
    max_new_tokens: int = 64,
) -> AccuracyReport:
    if task.kind == MULTIPLE_CHOICE:
        return eval_multiple_choice(params, tok, task)
    return eval_generative(params, tok, task, max_new_tokens)


def sweep_eval(
    checkpoints: list[Checkpoint],
    tok: TokenizerModel,
    qa: list[QAPair],
    tasks: list[BenchmarkTask],
    max_new_tokens: int = 64,
) -> SweepResult:
    """Average perplexity and every task metric for each checkpoint.

    All checkpoints must share the evaluation tokenizer's fingerprint; rows
    come out sorted by checkpoint fraction.
    """
    if not checkpoints:
        raise DataError("no checkpoints to sweep")
    for ckpt in checkpoints:
        if ckpt.tokenizer_fingerprint != tok.fingerprint:
            raise DataError(
                f"tokenizer fingerprint mismatch for checkpoint at fraction "
                f"{ckpt.fraction}"
            )
    fractions = [ckpt.fraction for ckpt in checkpoints]
    if len(set(fractions)) != len(fractions):
        raise DataError("duplicate fraction in checkpoint list")
    rows = []
    for ckpt in sorted(checkpoints, key=lambda c: c.fraction):
        report = average_perplexity(ckpt.params, tok, qa)
        task_reports = {
            task.name: evaluate_task(ckpt.params, tok, task, max_new_tokens)
            for task in tasks
        }
        rows.append(SweepRow(ckpt.fraction, report.average, task_reports))
    return SweepResult(tuple(rows), tuple(task.name for task in tasks))
