"""Benchmark task files: loading, validation, and conversion from native schemas.

A task file is JSONL whose first line is {"name": ..., "kind": ...} metadata;
multiple-choice items are {"query", "choices", "gold"}, generative items
{"query", "answer"}. The converter maps published benchmark dumps (arc,
hellaswag, winogrande, mmlu, truthfulqa, gsm8k families) into this schema via
per-family field maps that a config may override.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, fields, replace

from .errors import DataError

MULTIPLE_CHOICE = "multiple_choice"
GENERATIVE = "generative"

TASK_FAMILIES = ("arc", "hellaswag", "winogrande", "mmlu", "truthfulqa", "gsm8k")
_NAME_RE = re.compile(r"^[a-z0-9_]+$")


@dataclass(frozen=True)
class MCItem:
    query: str
    choices: tuple[str, ...]
    gold: int


@dataclass(frozen=True)
class GenItem:
    query: str
    answer: str


@dataclass(frozen=True)
class BenchmarkTask:
    name: str
    kind: str
    items: tuple

    def __post_init__(self):
        validate_task_name(self.name)
        if self.kind not in (MULTIPLE_CHOICE, GENERATIVE):
            raise DataError(f"unknown task kind '{self.kind}'")


def validate_task_name(name: str) -> None:
    if not _NAME_RE.match(name) or not name.startswith(TASK_FAMILIES):
        raise DataError(
            f"task name '{name}' does not match the translated benchmark set "
            f"(families: {', '.join(TASK_FAMILIES)})"
        )


def task_family(name: str) -> str:
    for family in TASK_FAMILIES:
        if name.startswith(family):
            return family
    raise DataError(f"task name '{name}' matches no known family")


def _require(record: dict, field_name: str, lineno: int):
    if not isinstance(record, dict) or field_name not in record:
        raise DataError(f"line {lineno}: missing field '{field_name}'")
    return record[field_name]


def load_task(path) -> BenchmarkTask:
    """Read a task file; the header line carries name and kind."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise DataError(f"task file '{path}' is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError("line 1: malformed header") from exc
    name = str(_require(header, "name", 1))
    kind = str(_require(header, "kind", 1))

    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: malformed record") from exc
        if kind == MULTIPLE_CHOICE:
            query = _require(record, "query", lineno)
            choices = _require(record, "choices", lineno)
            gold = _require(record, "gold", lineno)
            if not isinstance(choices, list) or len(choices) < 2:
                raise DataError(f"line {lineno}: needs at least 2 choices")
            if not isinstance(gold, int) or not 0 <= gold < len(choices):
                raise DataError(f"line {lineno}: gold index {gold!r} out of range")
            items.append(MCItem(str(query), tuple(str(c) for c in choices), gold))
        else:
            query = _require(record, "query", lineno)
            answer = _require(record, "answer", lineno)
            items.append(GenItem(str(query), str(answer)))
    return BenchmarkTask(name, kind, tuple(items))


def save_task(task: BenchmarkTask, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"name": task.name, "kind": task.kind}) + "\n")
        for item in task.items:
            if task.kind == MULTIPLE_CHOICE:
                row = {"query": item.query, "choices": list(item.choices), "gold": item.gold}
            else:
                row = {"query": item.query, "answer": item.answer}
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class FieldMap:
    """How to read one benchmark family's native records into the task schema."""

    kind: str = MULTIPLE_CHOICE
    query_field: str | None = None
    query_template: str | None = None
    choices_field: str | None = None
    choice_fields: tuple[str, ...] | None = None
    gold_field: str | None = None
    gold_mode: str = "index"  # index | label | onehot
    gold_labels: tuple[str, ...] | None = None
    labels_field: str | None = None
    answer_field: str | None = None
    choice_prefix: str = " "


BUILTIN_FIELD_MAPS: dict[str, FieldMap] = {
    "arc": FieldMap(
        query_field="question",
        choices_field="choices.text",
        gold_field="answerKey",
        gold_mode="label",
        labels_field="choices.label",
    ),
    "hellaswag": FieldMap(query_field="ctx", choices_field="endings", gold_field="label"),
    "winogrande": FieldMap(
        query_field="sentence",
        choice_fields=("option1", "option2"),
        gold_field="answer",
        gold_mode="label",
        gold_labels=("1", "2"),
    ),
    "mmlu": FieldMap(query_field="question", choices_field="choices", gold_field="answer"),
    "truthfulqa": FieldMap(
        query_field="question",
        choices_field="mc1_targets.choices",
        gold_field="mc1_targets.labels",
        gold_mode="onehot",
    ),
    "gsm8k": FieldMap(kind=GENERATIVE, query_field="question", answer_field="answer"),
}


def field_map_for(name: str, overrides: dict | None = None) -> FieldMap:
    """Field map for a task name: family builtin plus optional overrides."""
    fmap = BUILTIN_FIELD_MAPS[task_family(name)]
    if overrides:
        known = {f.name for f in fields(FieldMap)}
        unknown = set(overrides) - known
        if unknown:
            raise DataError(f"unknown field map keys: {sorted(unknown)}")
        clean = dict(overrides)
        for key in ("choice_fields", "gold_labels"):
            if clean.get(key) is not None:
                clean[key] = tuple(clean[key])
        fmap = replace(fmap, **clean)
    return fmap


def _dotted(record: dict, path: str, lineno: int):
    value = record
    for part in path.split("."):
        if not isinstance(value, dict) or part not in value:
            raise DataError(f"line {lineno}: missing field '{path}'")
        value = value[part]
    return value


def _resolve_gold(fmap: FieldMap, record: dict, n_choices: int, lineno: int) -> int:
    raw = _dotted(record, fmap.gold_field, lineno)
    if fmap.gold_mode == "onehot":
        if not isinstance(raw, list) or 1 not in raw:
            raise DataError(f"line {lineno}: field '{fmap.gold_field}' is not one-hot")
        gold = raw.index(1)
    elif fmap.gold_mode == "label":
        labels = (
            [str(x) for x in _dotted(record, fmap.labels_field, lineno)]
            if fmap.labels_field
            else list(fmap.gold_labels or ())
        )
        if str(raw) not in labels:
            raise DataError(f"line {lineno}: gold label {raw!r} not in {labels}")
        gold = labels.index(str(raw))
    else:
        try:
            gold = int(raw)
        except (TypeError, ValueError) as exc:
            raise DataError(f"line {lineno}: gold value {raw!r} is not an index") from exc
    if not 0 <= gold < n_choices:
        raise DataError(f"line {lineno}: gold index {gold} out of range")
    return gold


def _check_field_map(fmap: FieldMap) -> None:
    if fmap.query_field is None and fmap.query_template is None:
        raise DataError("field map needs query_field or query_template")
    if fmap.kind == GENERATIVE:
        if fmap.answer_field is None:
            raise DataError("generative field map needs answer_field")
    elif fmap.choices_field is None and not fmap.choice_fields:
        raise DataError("multiple-choice field map needs choices_field or choice_fields")
    elif fmap.gold_field is None:
        raise DataError("multiple-choice field map needs gold_field")


def convert_task(src_path, name: str, overrides: dict | None = None) -> BenchmarkTask:
    """Convert a native benchmark JSONL dump into a BenchmarkTask."""
    fmap = field_map_for(name, overrides)
    _check_field_map(fmap)
    items = []
    with open(src_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed record") from exc
            if fmap.query_template:
                try:
                    query = fmap.query_template.format(**record)
                except KeyError as exc:
                    raise DataError(
                        f"line {lineno}: query template references missing field {exc}"
                    ) from exc
            else:
                query = str(_dotted(record, fmap.query_field, lineno))
            if fmap.kind == GENERATIVE:
                answer = str(_dotted(record, fmap.answer_field, lineno))
                items.append(GenItem(query, answer))
                continue
            if fmap.choice_fields:
                raw_choices = [_dotted(record, c, lineno) for c in fmap.choice_fields]
            else:
                raw_choices = _dotted(record, fmap.choices_field, lineno)
            if not isinstance(raw_choices, list) or len(raw_choices) < 2:
                raise DataError(f"line {lineno}: needs at least 2 choices")
            choices = tuple(fmap.choice_prefix + str(c) for c in raw_choices)
            gold = _resolve_gold(fmap, record, len(choices), lineno)
            items.append(MCItem(query, choices, gold))
    if not items:
        raise DataError(f"task file '{src_path}' contains no items")
    return BenchmarkTask(name, fmap.kind, tuple(items))
