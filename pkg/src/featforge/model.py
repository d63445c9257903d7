"""Domain types for datasets, feature schemas, prompts, and realized feature values.

Everything here is immutable after construction and safe to share across
concurrent tasks.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Sequence

NAME_RE = re.compile(r"[a-z][a-z0-9_]*\Z")
MAX_NAME_LEN = 64
MAX_FEATURES = 32
MAX_CATEGORIES = 32


class FeatureKind(Enum):
    BOOLEAN = "boolean"
    INTEGER = "integer"
    REAL = "real"
    CATEGORICAL = "categorical"


# Spellings accepted from LM output for each kind.  The canonical form is the
# enum value; the Python-type spellings match what proposer prompts request.
KIND_ALIASES = {
    "bool": FeatureKind.BOOLEAN,
    "boolean": FeatureKind.BOOLEAN,
    "int": FeatureKind.INTEGER,
    "integer": FeatureKind.INTEGER,
    "float": FeatureKind.REAL,
    "real": FeatureKind.REAL,
    "number": FeatureKind.REAL,
    "literal": FeatureKind.CATEGORICAL,
    "categorical": FeatureKind.CATEGORICAL,
    "enum": FeatureKind.CATEGORICAL,
}


@dataclass(frozen=True)
class Violation:
    """One schema-validation failure, machine-readable code plus context."""

    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class SchemaValidationError(ValueError):
    """Raised when a feature-set document violates its invariants.

    Carries the full list of violations, not just the first one found.
    """

    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class TrainTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class FeatureValueType:
    """The value type of a feature: boolean, integer, real, or categorical."""

    kind: FeatureKind
    categories: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind is FeatureKind.CATEGORICAL:
            if not (2 <= len(self.categories) <= MAX_CATEGORIES):
                raise ValueError(
                    f"categorical type needs 2..{MAX_CATEGORIES} categories, "
                    f"got {len(self.categories)}"
                )
            if len(set(self.categories)) != len(self.categories):
                raise ValueError("categories must be unique")
            if any(not c for c in self.categories):
                raise ValueError("categories must be non-empty strings")
        elif self.categories:
            raise ValueError(f"{self.kind.value} type carries no categories")


@dataclass(frozen=True)
class FeatureDefinition:
    """A named, typed, described textual property plus its extraction prompt."""

    name: str
    value_type: FeatureValueType
    description: str
    extraction_prompt: str

    def __post_init__(self) -> None:
        if not NAME_RE.match(self.name) or len(self.name) > MAX_NAME_LEN:
            raise ValueError(f"bad feature name {self.name!r}")
        if not self.description:
            raise ValueError(f"feature {self.name!r} has empty description")
        if not self.extraction_prompt:
            raise ValueError(f"feature {self.name!r} has empty extraction prompt")


@dataclass(frozen=True)
class FeatureSet:
    """An ordered set of feature definitions with pairwise-distinct names."""

    features: tuple[FeatureDefinition, ...]

    def __post_init__(self) -> None:
        if not (1 <= len(self.features) <= MAX_FEATURES):
            raise ValueError(f"feature set must have 1..{MAX_FEATURES} features")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be distinct")

    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> FeatureDefinition:
        return self.features[i]


@dataclass(frozen=True)
class LabeledExample:
    id: str
    text: str
    label: str

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"example {self.id!r} has empty text")


@dataclass(frozen=True)
class DatasetSplits:
    """Train and annotation splits plus the class vocabulary."""

    train: tuple[LabeledExample, ...]
    annotation: tuple[LabeledExample, ...]
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.class_names) < 2:
            raise ValueError("need at least 2 classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be distinct")
        classes = set(self.class_names)
        for split_name, split in (("train", self.train), ("annotation", self.annotation)):
            for ex in split:
                if ex.label not in classes:
                    raise ValueError(
                        f"{split_name} example {ex.id!r} has label {ex.label!r} "
                        f"outside the class vocabulary"
                    )
        train_ids = {ex.id for ex in self.train}
        annot_ids = {ex.id for ex in self.annotation}
        overlap = train_ids & annot_ids
        if overlap:
            raise ValueError(f"train/annotation splits share ids: {sorted(overlap)[:5]}")


@dataclass(frozen=True)
class ExampleSet:
    """A sampled bundle of labelled texts grounding one proposer prompt."""

    set_id: int
    examples: tuple[LabeledExample, ...]


@dataclass(frozen=True)
class PromptCandidate:
    """The optimization variable: indices into the instruction and example-set pools."""

    instruction_id: int
    example_set_id: int

    def pair(self) -> tuple[int, int]:
        return (self.instruction_id, self.example_set_id)


# Missing-value reasons recorded on FeatureValue.missing().
REASON_PARSE_FAILED = "parse-failed"
REASON_REFUSED = "extraction-refused"
REASON_OUT_OF_VOCABULARY = "out-of-vocabulary"


@dataclass(frozen=True)
class FeatureValue:
    """One realized feature value: a typed scalar or a Missing marker."""

    kind: str  # "boolean" | "integer" | "real" | "categorical" | "missing"
    value: Any = None
    reason: str = ""

    @classmethod
    def boolean(cls, v: bool) -> "FeatureValue":
        return cls("boolean", bool(v))

    @classmethod
    def integer(cls, v: int) -> "FeatureValue":
        v = int(v)
        if not (-(2**63) <= v < 2**63):
            raise ValueError("integer feature value outside signed 64-bit range")
        return cls("integer", v)

    @classmethod
    def real(cls, v: float) -> "FeatureValue":
        v = float(v)
        if not math.isfinite(v):
            raise ValueError("real feature value must be finite")
        return cls("real", v)

    @classmethod
    def categorical(cls, v: str) -> "FeatureValue":
        return cls("categorical", str(v))

    @classmethod
    def missing(cls, reason: str) -> "FeatureValue":
        return cls("missing", None, reason)

    @property
    def is_missing(self) -> bool:
        return self.kind == "missing"

    def to_json(self) -> Any:
        if self.is_missing:
            return {"missing": self.reason}
        return self.value

    @classmethod
    def from_json(cls, obj: Any, vt: FeatureValueType) -> "FeatureValue":
        if isinstance(obj, dict):
            return cls.missing(str(obj.get("missing", REASON_PARSE_FAILED)))
        return coerce_value(obj, vt)


@dataclass(frozen=True)
class MatrixRow:
    example_id: str
    label: str
    values: tuple[FeatureValue, ...]


@dataclass(frozen=True)
class FeatureMatrix:
    """Realized feature vectors over a split, aligned to a feature set."""

    feature_set: FeatureSet
    rows: tuple[MatrixRow, ...]

    def __post_init__(self) -> None:
        width = len(self.feature_set)
        for row in self.rows:
            if len(row.values) != width:
                raise ValueError(
                    f"ragged row {row.example_id!r}: {len(row.values)} values, "
                    f"expected {width}"
                )
        ids = [r.example_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ValueError("row example ids must be distinct")

    def column(self, name: str) -> list[FeatureValue]:
        idx = self.feature_set.names().index(name)
        return [r.values[idx] for r in self.rows]

    def labels(self) -> list[str]:
        return [r.label for r in self.rows]


def coerce_value(obj: Any, vt: FeatureValueType) -> FeatureValue:
    """Coerce a raw JSON scalar to the declared feature type.

    Uncoercible inputs become Missing(parse-failed); a categorical answer
    outside the category list becomes Missing(out-of-vocabulary).
    """
    if obj is None:
        return FeatureValue.missing(REASON_PARSE_FAILED)
    try:
        if vt.kind is FeatureKind.BOOLEAN:
            if isinstance(obj, bool):
                return FeatureValue.boolean(obj)
            if isinstance(obj, (int, float)) and obj in (0, 1):
                return FeatureValue.boolean(bool(obj))
            if isinstance(obj, str) and obj.strip().lower() in ("true", "false", "yes", "no"):
                return FeatureValue.boolean(obj.strip().lower() in ("true", "yes"))
        elif vt.kind is FeatureKind.INTEGER:
            if isinstance(obj, bool):
                return FeatureValue.integer(int(obj))
            if isinstance(obj, int):
                return FeatureValue.integer(obj)
            if isinstance(obj, float) and obj.is_integer():
                return FeatureValue.integer(int(obj))
            if isinstance(obj, str):
                return FeatureValue.integer(int(obj.strip()))
        elif vt.kind is FeatureKind.REAL:
            if isinstance(obj, bool):
                return FeatureValue.real(float(obj))
            if isinstance(obj, (int, float)):
                return FeatureValue.real(float(obj))
            if isinstance(obj, str):
                return FeatureValue.real(float(obj.strip()))
        elif vt.kind is FeatureKind.CATEGORICAL:
            text = obj if isinstance(obj, str) else json.dumps(obj)
            text = text.strip()
            if text in vt.categories:
                return FeatureValue.categorical(text)
            lowered = {c.lower(): c for c in vt.categories}
            if text.lower() in lowered:
                return FeatureValue.categorical(lowered[text.lower()])
            return FeatureValue.missing(REASON_OUT_OF_VOCABULARY)
    except (ValueError, TypeError):
        pass
    return FeatureValue.missing(REASON_PARSE_FAILED)


def _raw_features(raw: Any) -> Any:
    if isinstance(raw, dict) and "features" in raw:
        return raw["features"]
    return raw


def validate_feature_set(raw: Any) -> FeatureSet:
    """Validate a feature-set-shaped document into a FeatureSet.

    Args:
        raw: a parsed document, either ``{"features": [...]}`` or a bare list
            of feature objects with name/type/description/extraction_prompt
            fields (``categories`` required for literal types).

    Returns:
        The validated FeatureSet.

    Raises:
        SchemaValidationError: with the full list of violations. Duplicate
            names are a violation, never silently deduplicated.
    """
    items = _raw_features(raw)
    violations: list[Violation] = []
    if not isinstance(items, list) or not items:
        raise SchemaValidationError(
            [Violation("EmptyFeatureList", "document contains no feature definitions")]
        )
    if len(items) > MAX_FEATURES:
        violations.append(
            Violation("TooManyFeatures", f"{len(items)} features exceed the cap of {MAX_FEATURES}")
        )
        items = items[:MAX_FEATURES]

    defs: list[FeatureDefinition] = []
    seen: set[str] = set()
    for pos, item in enumerate(items):
        if not isinstance(item, dict):
            violations.append(Violation("BadFeatureObject", f"feature #{pos} is not an object"))
            continue
        name = item.get("name")
        if not isinstance(name, str) or not NAME_RE.match(name) or len(name) > MAX_NAME_LEN:
            violations.append(
                Violation("BadIdentifier", f"feature #{pos} name {name!r} is not a snake_case identifier")
            )
            continue
        if name in seen:
            violations.append(Violation("DuplicateName", f"feature name {name!r} appears more than once"))
            continue
        seen.add(name)

        kind_raw = item.get("type", item.get("kind"))
        kind = KIND_ALIASES.get(str(kind_raw).strip().lower()) if kind_raw is not None else None
        if kind is None:
            violations.append(Violation("BadType", f"feature {name!r} has unknown type {kind_raw!r}"))
            continue

        categories: tuple[str, ...] = ()
        if kind is FeatureKind.CATEGORICAL:
            cats = item.get("categories", item.get("values", []))
            if not isinstance(cats, list):
                cats = []
            cats = [str(c) for c in cats]
            uniq = list(dict.fromkeys(c for c in cats if c))
            if not (2 <= len(uniq) <= MAX_CATEGORIES) or len(uniq) != len(cats):
                violations.append(
                    Violation(
                        "BadCategoricalArity",
                        f"feature {name!r} needs 2..{MAX_CATEGORIES} unique non-empty categories, got {cats!r}",
                    )
                )
                continue
            categories = tuple(uniq)
        elif item.get("categories"):
            violations.append(
                Violation("BadType", f"non-categorical feature {name!r} carries categories")
            )
            continue

        description = item.get("description")
        prompt = item.get("extraction_prompt", item.get("prompt"))
        if not isinstance(description, str) or not description.strip():
            violations.append(Violation("EmptyText", f"feature {name!r} has an empty description"))
            continue
        if not isinstance(prompt, str) or not prompt.strip():
            violations.append(Violation("EmptyText", f"feature {name!r} has an empty extraction prompt"))
            continue

        defs.append(
            FeatureDefinition(
                name=name,
                value_type=FeatureValueType(kind, categories),
                description=description.strip(),
                extraction_prompt=prompt.strip(),
            )
        )

    if violations:
        raise SchemaValidationError(violations)
    return FeatureSet(tuple(defs))


def serialize_feature_schema(fs: FeatureSet) -> str:
    """Canonical, byte-stable serialization of a feature set.

    Used both inside Extractor prompts and for schema-length measurement,
    so two identical sets must serialize to identical bytes.
    """
    doc = {
        "features": [
            {
                "name": f.name,
                "type": f.value_type.kind.value,
                **({"categories": list(f.value_type.categories)} if f.value_type.categories else {}),
                "description": f.description,
                "extraction_prompt": f.extraction_prompt,
            }
            for f in fs.features
        ]
    }
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False)


def parse_feature_schema(text: str) -> FeatureSet:
    """Inverse of serialize_feature_schema: parse and re-validate."""
    return validate_feature_set(json.loads(text))


def content_hash_id(text: str, label: str = "") -> str:
    """Stable content-derived id for datasets that ship without ids."""
    h = hashlib.sha256(f"{label}\x1f{text}".encode("utf-8")).hexdigest()
    return f"x{h[:16]}"


def sample_example_sets(
    train: Sequence[LabeledExample],
    n_sets: int,
    l: int,
    seed: int,
    stratified: bool = False,
) -> list[ExampleSet]:
    """Sample n_sets example sets of l examples each from the train split.

    Sampling is uniform without replacement within a set; sets are drawn
    independently and may overlap each other. Deterministic given the seed.

    Args:
        stratified: spread each set as evenly as possible across classes
            instead of sampling uniformly (off by default).

    Raises:
        TrainTooSmall: when the train split has fewer than l examples.
    """
    if len(train) < l:
        raise TrainTooSmall(f"train split has {len(train)} examples, need {l}")
    if n_sets < 1 or l < 1:
        raise ValueError("n_sets and l must be >= 1")
    rng = random.Random(f"{seed}/example-sets")
    sets: list[ExampleSet] = []
    for set_id in range(n_sets):
        if stratified:
            chosen = _stratified_sample(train, l, rng)
        else:
            chosen = rng.sample(list(train), l)
        sets.append(ExampleSet(set_id=set_id, examples=tuple(chosen)))
    return sets


def _stratified_sample(
    train: Sequence[LabeledExample], l: int, rng: random.Random
) -> list[LabeledExample]:
    by_class: dict[str, list[LabeledExample]] = {}
    for ex in train:
        by_class.setdefault(ex.label, []).append(ex)
    classes = sorted(by_class)
    pools = {c: rng.sample(by_class[c], len(by_class[c])) for c in classes}
    chosen: list[LabeledExample] = []
    i = 0
    while len(chosen) < l:
        cls = classes[i % len(classes)]
        if pools[cls]:
            chosen.append(pools[cls].pop())
        elif all(not p for p in pools.values()):
            break
        i += 1
    if len(chosen) < l:
        raise TrainTooSmall(f"exhausted classes after {len(chosen)} of {l} examples")
    return chosen


def class_distribution(examples: Iterable[LabeledExample]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for ex in examples:
        counts[ex.label] = counts.get(ex.label, 0) + 1
    return dict(sorted(counts.items()))
