"""Report rendering: sweep/stats CSVs and the single-checkpoint JSON report.

Everything here is a pure string builder so outputs stay byte-deterministic.
"""

from __future__ import annotations

import json

import numpy as np

from .evaluation import AccuracyReport, PerplexityReport, SweepResult
from .tasks import MULTIPLE_CHOICE

MMLU_AGGREGATE = "mmlu_lt"


def _num(v: float) -> str:
    return f"{v:.10g}"


def mmlu_task_names(task_names) -> list[str]:
    return [name for name in task_names if name.startswith("mmlu")]


def sweep_csv(result: SweepResult) -> str:
    """One row per fraction: avg perplexity plus per-task acc / acc_norm columns.

    When mmlu subset tasks are present an unweighted-mean aggregate column
    pair (mmlu_lt) is appended.
    """
    mmlu = mmlu_task_names(result.task_names)
    header = ["fraction", "avg_ppl"]
    for name in result.task_names:
        header.append(f"{name}_acc")
        if _has_norm(result, name):
            header.append(f"{name}_acc_norm")
    if mmlu:
        header += [f"{MMLU_AGGREGATE}_acc", f"{MMLU_AGGREGATE}_acc_norm"]

    lines = [",".join(header)]
    for row in result.rows:
        cells = [_num(row.fraction), _num(row.avg_perplexity)]
        for name in result.task_names:
            report = row.tasks[name]
            cells.append(_num(report.acc))
            if _has_norm(result, name):
                cells.append(_num(report.acc_norm))
        if mmlu:
            cells.append(_num(float(np.mean([row.tasks[n].acc for n in mmlu]))))
            cells.append(_num(float(np.mean([row.tasks[n].acc_norm for n in mmlu]))))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _has_norm(result: SweepResult, name: str) -> bool:
    return result.rows[0].tasks[name].kind == MULTIPLE_CHOICE


def sweep_series(result: SweepResult):
    """(perplexity series, accuracy series, mmlu subset series) for charts.

    The accuracy chart carries non-mmlu tasks plus the mmlu_lt aggregate;
    individual mmlu subsets go on their own chart.
    """
    ppl = [("avg_ppl", [(r.fraction, r.avg_perplexity) for r in result.rows])]
    mmlu = mmlu_task_names(result.task_names)
    acc = [
        (name, [(r.fraction, r.tasks[name].acc) for r in result.rows])
        for name in result.task_names
        if name not in mmlu
    ]
    if mmlu:
        acc.append(
            (
                MMLU_AGGREGATE,
                [
                    (r.fraction, float(np.mean([r.tasks[n].acc for n in mmlu])))
                    for r in result.rows
                ],
            )
        )
    mmlu_series = [
        (name, [(r.fraction, r.tasks[name].acc) for r in result.rows]) for name in mmlu
    ]
    return ppl, acc, mmlu_series


def record_length_hist_csv(token_counts: list[int], n_buckets: int = 20) -> str:
    """Bucketed record-length distribution; bucket counts sum to the record count."""
    counts = np.asarray(token_counts)
    buckets = min(n_buckets, max(1, int(counts.max() - counts.min()) + 1))
    hist, edges = np.histogram(counts, bins=buckets)
    lines = ["bucket_lo,bucket_hi,count"]
    for i, c in enumerate(hist):
        lines.append(f"{_num(float(edges[i]))},{_num(float(edges[i + 1]))},{int(c)}")
    return "\n".join(lines) + "\n"


def source_dist_csv(sources: list[str | None]) -> str:
    """Document counts per source label; unlabeled documents count as "unknown"."""
    tally: dict[str, int] = {}
    for s in sources:
        key = s if s else "unknown"
        tally[key] = tally.get(key, 0) + 1
    lines = ["source,count"]
    for key in sorted(tally):
        lines.append(f"{key},{tally[key]}")
    return "\n".join(lines) + "\n"


def stats_json(stats, tokenizer_fingerprint: str) -> str:
    payload = {
        "total_tokens": stats.total_tokens,
        "record_count": stats.record_count,
        "mean_tokens_per_record": stats.mean_tokens_per_record,
        "std_tokens_per_record": stats.std_tokens_per_record,
        "tokenizer_fingerprint": tokenizer_fingerprint,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def accuracy_report_dict(report: AccuracyReport) -> dict:
    out = {
        "task": report.task,
        "kind": report.kind,
        "n_items": report.n_items,
        "acc": report.acc,
        "skipped": report.skipped,
    }
    if report.acc_norm is not None:
        out["acc_norm"] = report.acc_norm
    if report.kind != MULTIPLE_CHOICE:
        out["unparseable"] = report.unparseable
    return out


def eval_report_json(
    checkpoint_path: str,
    fraction: float,
    perplexity: PerplexityReport,
    task_reports: dict[str, AccuracyReport],
) -> str:
    payload = {
        "checkpoint": checkpoint_path,
        "fraction": fraction,
        "perplexity": {
            "average": perplexity.average,
            "skipped": perplexity.skipped,
            "items": [[item_id, ppl] for item_id, ppl in perplexity.per_item],
        },
        "tasks": {
            name: accuracy_report_dict(rep) for name, rep in task_reports.items()
        },
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
