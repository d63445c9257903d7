"""Request builders and response parsers for the LM modules: feature
proposer, extractor, interpretability scorer, performance feedback, and the
reflective instruction proposer with its data summarizer.

Agents are stateless; all shared state (audit log, ledger, rate bound) lives
in the gateway. Helper-module prompts are fixed template assets and are never
optimized; only the proposer's instruction is part of the search space.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from random import Random
from typing import Sequence

from . import prompts
from .gateway import (
    GREEDY,
    EndpointRejected,
    GatewayError,
    GenerationParams,
    LmGateway,
    SchemaViolation,
    Timeout,
    Transport,
    system,
    user,
)
from .metrics import MetricsBundle
from .model import (
    ExampleSet,
    FeatureMatrix,
    FeatureSet,
    FeatureValue,
    LabeledExample,
    MatrixRow,
    REASON_PARSE_FAILED,
    REASON_REFUSED,
    coerce_value,
    serialize_feature_schema,
    validate_feature_set,
)

logger = logging.getLogger(__name__)

# Neutral default seed instruction; the hand-crafted seed the experiments
# started from is external, so the shipped default stays generic and the
# run config can override it.
DEFAULT_SEED_INSTRUCTION = (
    "Propose distinct, human-interpretable properties of the text, each "
    "checkable from the text alone, that help distinguish the given labels."
)

MIN_PROPOSED_FEATURES = 5
MAX_PROPOSED_FEATURES = 10

# Sized for a 16k-token context at ~4 chars per token, minus instruction room.
DEFAULT_CHAR_BUDGET = 48_000

CRITERIA = ("readable", "human_worded", "understandable", "meaningful", "trackable")

TRANSIENT_ERRORS = (Transport, Timeout, EndpointRejected)

PROPOSAL_SCHEMA = {
    "type": "object",
    "required": ["features"],
    "properties": {
        "reasoning": {"type": "string"},
        "features": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "type", "description", "extraction_prompt"],
                "properties": {
                    "name": {"type": "string"},
                    "type": {"type": "string"},
                    "categories": {"type": "array", "items": {"type": "string"}},
                    "description": {"type": "string"},
                    "extraction_prompt": {"type": "string"},
                },
            },
        },
    },
}

EXTRACT_SCHEMA = {"type": "object"}

INTERPRET_SCHEMA = {
    "type": "object",
    "required": ["features", "feedback"],
    "properties": {
        "reasoning": {"type": "string"},
        "features": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "leaking", *CRITERIA],
                "properties": {
                    "name": {"type": "string"},
                    "leaking": {"type": "boolean"},
                    "rationale": {"type": "string"},
                    **{
                        c: {"type": "number", "minimum": 0, "maximum": 10}
                        for c in CRITERIA
                    },
                },
            },
        },
        "feedback": {"type": "string", "minLength": 1},
    },
}

FEEDBACK_SCHEMA = {
    "type": "object",
    "required": ["feedback"],
    "properties": {
        "reasoning": {"type": "string"},
        "feedback": {"type": "string", "minLength": 1},
    },
}

REFLECT_SCHEMA = {
    "type": "object",
    "required": ["instructions"],
    "properties": {
        "reasoning": {"type": "string"},
        "instructions": {"type": "array", "minItems": 1, "items": {"type": "string"}},
    },
}


class ValidationFailed(ValueError):
    """The proposer returned well-formed JSON that is not a valid feature set."""

    def __init__(self, violations):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


@dataclass(frozen=True)
class FeatureInterpretability:
    name: str
    scores: dict[str, float]  # criterion -> [0, 1]
    leakage_flag: bool
    rationale: str

    def contribution(self) -> float:
        if self.leakage_flag:
            return 0.0
        return sum(self.scores[c] for c in CRITERIA) / len(CRITERIA)


@dataclass(frozen=True)
class InterpretabilityReport:
    per_feature: tuple[FeatureInterpretability, ...]
    set_score: float
    feedback_text: str

    @staticmethod
    def compute_set_score(per_feature: Sequence[FeatureInterpretability]) -> float:
        if not per_feature:
            return 0.0
        return sum(f.contribution() for f in per_feature) / len(per_feature)


@dataclass(frozen=True)
class DataSummary:
    class_counts: dict[str, int]
    snippets: dict[str, tuple[str, ...]]
    mean_text_length: float
    vocabulary_hints: tuple[str, ...]

    def render(self) -> str:
        lines = ["class distribution:"]
        for cls, count in self.class_counts.items():
            lines.append(f"  {cls}: {count}")
        lines.append(f"mean text length: {self.mean_text_length:.1f} chars")
        if self.vocabulary_hints:
            lines.append("frequent terms: " + ", ".join(self.vocabulary_hints))
        for cls, snips in self.snippets.items():
            for s in snips:
                lines.append(f"sample ({cls}): {s}")
        return "\n".join(lines)


def _truncate(text: str, cap: int) -> str:
    if len(text) <= cap:
        return text
    return text[: max(cap - 1, 1)] + "…"


def _render_examples(examples: Sequence[LabeledExample], char_budget: int) -> str:
    # Truncation hits example texts only, never the surrounding instruction.
    per_text = max(200, char_budget // max(len(examples), 1))
    total = sum(len(e.text) for e in examples)
    lines = []
    for i, ex in enumerate(examples, start=1):
        text = ex.text if total <= char_budget else _truncate(ex.text, per_text)
        lines.append(f"[{i}] label={ex.label}\n    {text}")
    return "\n".join(lines)


def propose_features(
    gateway: LmGateway,
    instruction: str,
    example_set: ExampleSet,
    params: GenerationParams,
    candidate: str = "-",
    char_budget: int = DEFAULT_CHAR_BUDGET,
) -> FeatureSet:
    """Ask the proposer for a feature schema grounded in one example set.

    Raises:
        SchemaViolation: structured output still malformed after retries.
        ValidationFailed: parsed output violates feature-set invariants.
    """
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    body = prompts.render(
        "propose",
        instruction=instruction.strip(),
        examples=_render_examples(example_set.examples, char_budget),
        min_features=str(MIN_PROPOSED_FEATURES),
        max_features=str(MAX_PROPOSED_FEATURES),
    )
    messages = [system(prompts.SYSTEM_PROMPTS["propose"]), user(body)]
    doc, _ = gateway.complete_structured(
        messages, params, PROPOSAL_SCHEMA, role="proposer", candidate=candidate
    )
    try:
        return validate_feature_set(doc)
    except Exception as err:  # SchemaValidationError carries the violation list
        raise ValidationFailed(getattr(err, "violations", [str(err)])) from err


def extract(
    gateway: LmGateway,
    text: str,
    fs: FeatureSet,
    params: GenerationParams = GREEDY,
    candidate: str = "-",
    char_budget: int = DEFAULT_CHAR_BUDGET,
) -> tuple[FeatureValue, ...]:
    """Extract all feature values for one text in a single structured call.

    Greedy decoding, no chain-of-thought. Uncoercible fields come back as
    Missing(parse-failed); if the gateway hard-fails after its retries the
    whole vector is Missing(extraction-refused) and evaluation proceeds.
    """
    names = fs.names()
    body = prompts.render(
        "extract",
        schema=serialize_feature_schema(fs),
        text=_truncate(text, char_budget),
        names=", ".join(names),
    )
    messages = [system(prompts.SYSTEM_PROMPTS["extract"]), user(body)]
    try:
        doc, _ = gateway.complete_structured(
            messages, params, EXTRACT_SCHEMA, role="extractor", candidate=candidate
        )
    except SchemaViolation:
        return tuple(FeatureValue.missing(REASON_PARSE_FAILED) for _ in names)
    except TRANSIENT_ERRORS:
        return tuple(FeatureValue.missing(REASON_REFUSED) for _ in names)
    return tuple(
        coerce_value(doc.get(f.name), f.value_type) for f in fs.features
    )


def extract_all(
    gateway: LmGateway,
    annotation: Sequence[LabeledExample],
    fs: FeatureSet,
    params: GenerationParams = GREEDY,
    candidate: str = "-",
    char_budget: int = DEFAULT_CHAR_BUDGET,
) -> FeatureMatrix:
    """Realize the feature set over a whole split: one extractor call per
    example, parallel up to the gateway bound, rows in input order."""
    if not annotation:
        raise ValueError("annotation split must be non-empty")

    def one(ex: LabeledExample) -> tuple[FeatureValue, ...]:
        return extract(gateway, ex.text, fs, params, candidate, char_budget)

    if gateway.max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=gateway.max_in_flight) as pool:
            vectors = list(pool.map(one, annotation))
    else:
        vectors = [one(ex) for ex in annotation]
    rows = tuple(
        MatrixRow(ex.id, ex.label, vec) for ex, vec in zip(annotation, vectors)
    )
    return FeatureMatrix(feature_set=fs, rows=rows)


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def score_interpretability(
    gateway: LmGateway,
    fs: FeatureSet,
    class_names: Sequence[str],
    leakage_hints: Sequence[str] = (),
    params: GenerationParams = GREEDY,
    candidate: str = "-",
) -> InterpretabilityReport:
    """One structured scoring call over the feature definitions.

    Criterion scores are requested on a 0-10 integer scale and mapped to
    [0,1]. Features named in leakage_hints are force-flagged regardless of
    what the model said, and the set score is always recomputed locally.
    """
    body = prompts.render(
        "interpret",
        class_names=", ".join(class_names),
        schema=serialize_feature_schema(fs),
    )
    messages = [system(prompts.SYSTEM_PROMPTS["interpret"]), user(body)]
    doc, _ = gateway.complete_structured(
        messages, params, INTERPRET_SCHEMA, role="scorer", candidate=candidate
    )
    scored = {str(item.get("name", "")): item for item in doc["features"]}
    hints = set(leakage_hints)
    per_feature = []
    for feat in fs.features:
        item = scored.get(feat.name)
        if item is None:
            per_feature.append(
                FeatureInterpretability(
                    name=feat.name,
                    scores={c: 0.0 for c in CRITERIA},
                    leakage_flag=feat.name in hints,
                    rationale="missing from scorer response",
                )
            )
            continue
        per_feature.append(
            FeatureInterpretability(
                name=feat.name,
                scores={c: _clamp01(float(item[c]) / 10.0) for c in CRITERIA},
                leakage_flag=bool(item["leaking"]) or feat.name in hints,
                rationale=str(item.get("rationale", "")),
            )
        )
    per = tuple(per_feature)
    return InterpretabilityReport(
        per_feature=per,
        set_score=InterpretabilityReport.compute_set_score(per),
        feedback_text=str(doc["feedback"]),
    )


def render_metrics_table(metrics: MetricsBundle) -> str:
    """Deterministic text rendering of a metrics bundle.

    Doubles as the fallback feedback when the LM call fails, so it must name
    every feature (zero-coverage ones included).
    """
    lines = [
        f"macro F1: {metrics.macro_f1:.4f} over {metrics.fold_count} folds",
        "per-feature diagnostics (importance = SHAP):",
    ]
    for name, m in metrics.per_feature.items():
        leak = "LEAKING" if m.leakage_flag else "ok"
        lines.append(
            f"- {name}: shap={m.shap_importance:.4f} mi={m.mutual_information:.4f} "
            f"coverage={m.coverage:.2f} leakage={leak}"
        )
    lines.append("confusion matrix rows=true cols=predicted, classes " + ", ".join(metrics.class_names) + ":")
    for cls, row in zip(metrics.class_names, metrics.confusion):
        lines.append(f"  {cls}: " + " ".join(str(x) for x in row))
    if metrics.note:
        lines.append(f"note: {metrics.note}")
    return "\n".join(lines)


def performance_feedback(
    gateway: LmGateway,
    metrics: MetricsBundle,
    params: GenerationParams = GREEDY,
    candidate: str = "-",
) -> str:
    """Render dataset-level measures into prose feedback for the reflector.

    Never stalls the loop: on any gateway failure it returns the
    deterministic table rendering instead.
    """
    if not metrics.per_feature:
        raise ValueError("metrics bundle has no per-feature entries")
    table = render_metrics_table(metrics)
    body = prompts.render("feedback", metrics_table=table)
    messages = [system(prompts.SYSTEM_PROMPTS["feedback"]), user(body)]
    try:
        doc, _ = gateway.complete_structured(
            messages, params, FEEDBACK_SCHEMA, role="feedback", candidate=candidate
        )
        return str(doc["feedback"])
    except GatewayError:
        logger.warning("performance feedback failed; using templated fallback")
        return table


def _dedupe(texts: Sequence[str]) -> list[str]:
    seen = set()
    out = []
    for t in texts:
        key = t.strip()
        if key and key not in seen:
            seen.add(key)
            out.append(key)
    return out


def reflect_instructions(
    gateway: LmGateway,
    summary: DataSummary,
    current_instruction: str,
    interp_feedback: str,
    perf_feedback: str,
    score: float,
    k: int,
    mode: str = "reflective",
    params: GenerationParams = GREEDY,
    candidate: str = "-",
) -> list[str]:
    """Propose k distinct replacement instructions.

    Reflective mode feeds both feedback texts to the model; scalar_only mode
    feeds only the numeric combined score (the ablation baseline) and neither
    feedback text. Falls back to [current_instruction] if the model never
    returns usable output.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if mode not in ("reflective", "scalar_only"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "reflective":
        body = prompts.render(
            "reflect",
            data_summary=summary.render(),
            current_instruction=current_instruction,
            interp_feedback=interp_feedback,
            perf_feedback=perf_feedback,
            k=str(k),
        )
        sys_prompt = prompts.SYSTEM_PROMPTS["reflect"]
    else:
        body = prompts.render(
            "reflect_scalar",
            data_summary=summary.render(),
            current_instruction=current_instruction,
            score=f"{score:.4f}",
            k=str(k),
        )
        sys_prompt = prompts.SYSTEM_PROMPTS["reflect_scalar"]

    messages = [system(sys_prompt), user(body)]
    try:
        doc, _ = gateway.complete_structured(
            messages, params, REFLECT_SCHEMA, role="reflector", candidate=candidate
        )
        got = _dedupe(doc["instructions"])[:k]
        if len(got) < k:
            retry = messages + [
                user(
                    f"Provide {k} clearly distinct instructions; the previous "
                    f"reply contained duplicates or too few."
                )
            ]
            doc2, _ = gateway.complete_structured(
                retry, params, REFLECT_SCHEMA, role="reflector", candidate=candidate
            )
            got = _dedupe(list(got) + list(doc2["instructions"]))[:k]
    except GatewayError as err:
        logger.warning("instruction reflection failed (%s); keeping current instruction", err)
        return [current_instruction]
    base = got[0] if got else current_instruction
    i = 2
    while len(got) < k:
        padded = f"{base} (variant {i})"
        if padded not in got:
            got.append(padded)
        i += 1
    return got[:k]


_WORD_RE = re.compile(r"[a-z][a-z0-9']{2,}")
_STOPWORDS = frozenset(
    "the and for with that this from are was were has have had not you your "
    "but all can will its our out they them their there here when what who "
    "how why where which while about into over under of in on at by an a is "
    "it to as be or we".split()
)


def build_data_summary(train: Sequence[LabeledExample], seed: int) -> DataSummary:
    """Deterministic digest of the train split for the reflector prompt."""
    if not train:
        raise ValueError("train split must be non-empty")
    rng = Random(f"{seed}/summary")
    counts: dict[str, int] = {}
    by_class: dict[str, list[LabeledExample]] = {}
    for ex in train:
        counts[ex.label] = counts.get(ex.label, 0) + 1
        by_class.setdefault(ex.label, []).append(ex)
    snippets = {
        cls: tuple(
            _truncate(ex.text, 240)
            for ex in rng.sample(members, min(2, len(members)))
        )
        for cls, members in sorted(by_class.items())
    }
    freq: dict[str, int] = {}
    for ex in train:
        for token in set(_WORD_RE.findall(ex.text.lower())):
            if token not in _STOPWORDS:
                freq[token] = freq.get(token, 0) + 1
    hints = tuple(
        t for t, _ in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:8]
    )
    return DataSummary(
        class_counts=dict(sorted(counts.items())),
        snippets=snippets,
        mean_text_length=sum(len(ex.text) for ex in train) / len(train),
        vocabulary_hints=hints,
    )
