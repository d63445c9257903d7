"""Dataset ingestion: JSON-lines and CSV readers plus deterministic
train/annotation split construction."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from random import Random
from typing import Sequence

from .model import DatasetSplits, LabeledExample, content_hash_id


class IngestError(ValueError):
    pass


class MalformedRecord(IngestError):
    def __init__(self, line: int, why: str):
        self.line = line
        super().__init__(f"line {line}: {why}")


class ClassQuotaUnmet(IngestError):
    pass


class DuplicateId(IngestError):
    pass


def read_examples(path: str | Path, fmt: str, require_label: bool = True) -> list[LabeledExample]:
    """Read labelled (or, for extraction jobs, unlabelled) examples.

    JSONL records are objects {"text":..., "label":..., "id":?}; CSV files
    need a header with text,label[,id] columns. Missing ids are assigned
    from a content hash so split-disjointness stays checkable.

    Raises:
        MalformedRecord: with the 1-based offending line number.
        DuplicateId: a repeated explicit id or repeated identical content.
    """
    path = Path(path)
    if fmt == "jsonl":
        raw = _read_jsonl(path, require_label)
    elif fmt == "csv":
        raw = _read_csv(path, require_label)
    else:
        raise IngestError(f"unknown dataset format {fmt!r}")

    examples: list[LabeledExample] = []
    seen: set[str] = set()
    for line, text, label, explicit_id in raw:
        ex_id = explicit_id if explicit_id else content_hash_id(text, label)
        if ex_id in seen:
            kind = "id" if explicit_id else "content"
            raise DuplicateId(f"line {line}: duplicate {kind} {ex_id!r}")
        seen.add(ex_id)
        examples.append(LabeledExample(id=ex_id, text=text, label=label))
    return examples


def _read_jsonl(path: Path, require_label: bool):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as err:
                raise MalformedRecord(line_no, f"invalid JSON: {err}") from err
            if not isinstance(obj, dict):
                raise MalformedRecord(line_no, "record is not an object")
            text = obj.get("text")
            if not isinstance(text, str) or not text:
                raise MalformedRecord(line_no, "missing or empty 'text'")
            label = obj.get("label")
            if require_label and (not isinstance(label, str) or not label):
                raise MalformedRecord(line_no, "missing or empty 'label'")
            explicit_id = obj.get("id")
            if explicit_id is not None and not isinstance(explicit_id, str):
                raise MalformedRecord(line_no, "'id' must be a string")
            out.append((line_no, text, label if isinstance(label, str) else "", explicit_id))
    return out


def _read_csv(path: Path, require_label: bool):
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "text" not in reader.fieldnames:
            raise MalformedRecord(1, "CSV header must contain a 'text' column")
        if require_label and "label" not in reader.fieldnames:
            raise MalformedRecord(1, "CSV header must contain a 'label' column")
        for row in reader:
            line_no = reader.line_num
            text = (row.get("text") or "").strip()
            if not text:
                raise MalformedRecord(line_no, "missing or empty 'text'")
            label = (row.get("label") or "").strip()
            if require_label and not label:
                raise MalformedRecord(line_no, "missing or empty 'label'")
            explicit_id = (row.get("id") or "").strip() or None
            out.append((line_no, text, label, explicit_id))
    return out


def _proportional_allocation(counts: dict[str, int], total: int) -> dict[str, int]:
    """Largest-remainder allocation of `total` slots across classes,
    capped by per-class availability."""
    pool = sum(counts.values())
    shares = {c: total * n / pool for c, n in counts.items()}
    alloc = {c: min(int(share), counts[c]) for c, share in shares.items()}
    remainders = sorted(
        counts, key=lambda c: (-(shares[c] - int(shares[c])), c)
    )
    i = 0
    while sum(alloc.values()) < total and i < 10 * len(counts):
        c = remainders[i % len(remainders)]
        if alloc[c] < counts[c]:
            alloc[c] += 1
        i += 1
    return alloc


def build_splits(
    examples: Sequence[LabeledExample],
    train_per_class: int,
    annotation_size: int,
    seed: int,
) -> DatasetSplits:
    """Deterministic disjoint splits: a per-class train quota and a fixed-size
    annotation split stratified by the remaining empirical distribution.

    Raises:
        ClassQuotaUnmet: a class cannot fill its train quota, or the
            remaining pool cannot fill the annotation split.
    """
    class_names = tuple(sorted({ex.label for ex in examples}))
    if len(class_names) < 2:
        raise ClassQuotaUnmet(f"need at least 2 classes, found {list(class_names)}")
    rng = Random(f"{seed}/ingest")
    by_class: dict[str, list[LabeledExample]] = {c: [] for c in class_names}
    for ex in examples:
        by_class[ex.label].append(ex)
    for members in by_class.values():
        rng.shuffle(members)

    train: list[LabeledExample] = []
    remaining: dict[str, list[LabeledExample]] = {}
    for cls in class_names:
        members = by_class[cls]
        if len(members) < train_per_class:
            raise ClassQuotaUnmet(
                f"class {cls!r} has {len(members)} examples, train quota is {train_per_class}"
            )
        train.extend(members[:train_per_class])
        remaining[cls] = members[train_per_class:]

    pool_counts = {c: len(remaining[c]) for c in class_names}
    if sum(pool_counts.values()) < annotation_size:
        raise ClassQuotaUnmet(
            f"annotation split needs {annotation_size} examples, only "
            f"{sum(pool_counts.values())} remain after the train quota"
        )
    alloc = _proportional_allocation(pool_counts, annotation_size)
    annotation: list[LabeledExample] = []
    for cls in class_names:
        annotation.extend(remaining[cls][: alloc[cls]])

    return DatasetSplits(
        train=tuple(train), annotation=tuple(annotation), class_names=class_names
    )


def ingest(
    path: str | Path,
    fmt: str,
    train_per_class: int,
    annotation_size: int,
    seed: int,
) -> DatasetSplits:
    """Read a dataset file and build the run's splits in one step."""
    return build_splits(read_examples(path, fmt), train_per_class, annotation_size, seed)
