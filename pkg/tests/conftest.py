"""Shared fixtures: feature-matrix builders, the planted synthetic corpus,
and scripted-LM transcripts that drive the whole pipeline offline."""

from __future__ import annotations

import hashlib
import json
import random
import re

import pytest

from featforge.gateway import rule

from featforge.model import (
    DatasetSplits,
    FeatureDefinition,
    FeatureKind,
    FeatureMatrix,
    FeatureSet,
    FeatureValue,
    FeatureValueType,
    LabeledExample,
    MatrixRow,
)


def bool_feat(name: str) -> FeatureDefinition:
    return FeatureDefinition(
        name=name,
        value_type=FeatureValueType(FeatureKind.BOOLEAN),
        description=f"whether the text conveys {name.replace('_', ' ')}",
        extraction_prompt=f"Does the text convey {name.replace('_', ' ')}? Answer true or false.",
    )


def int_feat(name: str) -> FeatureDefinition:
    return FeatureDefinition(
        name=name,
        value_type=FeatureValueType(FeatureKind.INTEGER),
        description=f"count of {name.replace('_', ' ')}",
        extraction_prompt=f"How many {name.replace('_', ' ')} does the text contain?",
    )


def real_feat(name: str) -> FeatureDefinition:
    return FeatureDefinition(
        name=name,
        value_type=FeatureValueType(FeatureKind.REAL),
        description=f"intensity of {name.replace('_', ' ')}",
        extraction_prompt=f"Rate the {name.replace('_', ' ')} of the text as a number.",
    )


def cat_feat(name: str, categories: tuple[str, ...]) -> FeatureDefinition:
    return FeatureDefinition(
        name=name,
        value_type=FeatureValueType(FeatureKind.CATEGORICAL, categories),
        description=f"the {name.replace('_', ' ')} of the text",
        extraction_prompt=f"Which {name.replace('_', ' ')} fits best? One of: " + ", ".join(categories),
    )


def build_matrix(features, rows) -> FeatureMatrix:
    """rows: list of (example_id, label, [FeatureValue, ...])."""
    return FeatureMatrix(
        feature_set=FeatureSet(tuple(features)),
        rows=tuple(MatrixRow(rid, label, tuple(vals)) for rid, label, vals in rows),
    )


# ---------------------------------------------------------------------------
# Planted synthetic corpus: the label is a deterministic function of two
# boolean properties that are spelled out in the text; four more properties
# are label-independent noise. A hidden generator keeps the ground truth so
# scripted extractor backends can answer from it.
# ---------------------------------------------------------------------------

PLANTED_CLASSES = ("alpha", "beta", "gamma")


def planted_schema_doc() -> dict:
    """The feature schema a scripted proposer emits, as a raw document."""
    return {
        "reasoning": "The texts flag a crimson or azure market plus a direction.",
        "features": [
            {
                "name": "mentions_crimson",
                "type": "bool",
                "description": "the text mentions a crimson market",
                "extraction_prompt": "Does the text mention a crimson market?",
            },
            {
                "name": "trend_direction",
                "type": "literal",
                "categories": ["rising", "falling"],
                "description": "the stated direction of the trend",
                "extraction_prompt": "Is the trend rising or falling?",
            },
            {
                "name": "word_count_bucket",
                "type": "int",
                "description": "rough length of the note in words",
                "extraction_prompt": "Roughly how many words does the note have?",
            },
            {
                "name": "urgency_score",
                "type": "float",
                "description": "how urgent the note sounds",
                "extraction_prompt": "Rate the urgency of the note from 0 to 1.",
            },
            {
                "name": "cites_figures",
                "type": "bool",
                "description": "the note cites concrete figures",
                "extraction_prompt": "Does the note cite concrete figures?",
            },
            {
                "name": "register",
                "type": "literal",
                "categories": ["formal", "casual", "terse"],
                "description": "the linguistic register of the note",
                "extraction_prompt": "Is the register formal, casual, or terse?",
            },
        ],
    }


def _planted_label(a: bool, b: bool) -> str:
    if not a:
        return "gamma"
    return "alpha" if b else "beta"


def _noise_int(doc_id: str, salt: str, mod: int) -> int:
    h = hashlib.sha256(f"{salt}:{doc_id}".encode()).hexdigest()
    return int(h[:8], 16) % mod


class PlantedCorpus:
    """Synthetic corpus with a hidden ground-truth feature table."""

    def __init__(self, n_train_per_class=16, n_annotation=512, label_noise=0.0, seed=7):
        rng = random.Random(seed)
        self.truth: dict[str, dict] = {}
        train: list[LabeledExample] = []
        annotation: list[LabeledExample] = []

        def make_example(i: int) -> LabeledExample:
            doc_id = f"doc{i:05d}"
            a = rng.random() < 0.5
            b = rng.random() < 0.5
            label = _planted_label(a, b)
            if label_noise and rng.random() < label_noise:
                label = rng.choice([c for c in PLANTED_CLASSES if c != label])
            color = "crimson" if a else "azure"
            trend = "rising" if b else "falling"
            filler = ["volumes", "steady", "desk", "note", "session"][: 2 + _noise_int(doc_id, "len", 3)]
            text = f"{doc_id} {color} market with {trend} momentum " + " ".join(filler)
            self.truth[doc_id] = {
                "mentions_crimson": a,
                "trend_direction": trend,
                "word_count_bucket": 6 + _noise_int(doc_id, "wc", 5),
                "urgency_score": _noise_int(doc_id, "urg", 100) / 100.0,
                "cites_figures": _noise_int(doc_id, "fig", 2) == 1,
                "register": ["formal", "casual", "terse"][_noise_int(doc_id, "reg", 3)],
            }
            return LabeledExample(id=doc_id, text=text, label=label)

        i = 0
        per_class = {c: 0 for c in PLANTED_CLASSES}
        while min(per_class.values()) < n_train_per_class:
            ex = make_example(i)
            i += 1
            if per_class[ex.label] < n_train_per_class:
                per_class[ex.label] += 1
                train.append(ex)
        while len(annotation) < n_annotation:
            ex = make_example(i)
            i += 1
            annotation.append(ex)

        self.splits = DatasetSplits(
            train=tuple(train), annotation=tuple(annotation), class_names=PLANTED_CLASSES
        )

    def truth_value(self, doc_id: str, feature: str):
        return self.truth[doc_id][feature]

    def matrix(self, split="annotation") -> FeatureMatrix:
        """Ground-truth realization of the planted schema over a split."""
        from featforge.model import validate_feature_set

        fs = validate_feature_set(planted_schema_doc())
        rows = []
        for ex in getattr(self.splits, split):
            vals = []
            for feat in fs.features:
                raw = self.truth[ex.id][feat.name]
                if feat.value_type.kind is FeatureKind.BOOLEAN:
                    vals.append(FeatureValue.boolean(raw))
                elif feat.value_type.kind is FeatureKind.INTEGER:
                    vals.append(FeatureValue.integer(raw))
                elif feat.value_type.kind is FeatureKind.REAL:
                    vals.append(FeatureValue.real(raw))
                else:
                    vals.append(FeatureValue.categorical(raw))
            rows.append(MatrixRow(ex.id, ex.label, tuple(vals)))
        return FeatureMatrix(feature_set=fs, rows=tuple(rows))


@pytest.fixture(scope="session")
def planted_corpus() -> PlantedCorpus:
    return PlantedCorpus()


@pytest.fixture(scope="session")
def small_planted_corpus() -> PlantedCorpus:
    return PlantedCorpus(n_train_per_class=16, n_annotation=96, seed=11)


# ---------------------------------------------------------------------------
# Scripted transcripts that drive the full pipeline. Matchers key on the
# fixed system prompts of each agent role.
# ---------------------------------------------------------------------------

PROPOSE_MARK = "You design feature schemas"
EXTRACT_MARK = "You extract feature values"
INTERPRET_MARK = "You audit feature definitions"
FEEDBACK_MARK = "You summarize classifier diagnostics"
REFLECT_MARK = "You revise the instruction"

LABEL_ECHO_FEATURE = {
    "name": "sentiment_label",
    "type": "literal",
    "categories": list(PLANTED_CLASSES),
    "description": "the sentiment label of the text",
    "extraction_prompt": "Classify the text as alpha, beta, or gamma.",
}

_DOC_ID_RE = re.compile(r"doc\d{5}")


def perfect_interpretability_reply(names, leaking=()):
    return {
        "reasoning": "definitions are short and text-grounded",
        "features": [
            {
                "name": n,
                "readable": 10,
                "human_worded": 10,
                "understandable": 10,
                "meaningful": 10,
                "trackable": 10,
                "leaking": n in set(leaking),
                "rationale": "grounded in the text",
            }
            for n in names
        ],
        "feedback": "all features read naturally and track concrete text properties",
    }


def pipeline_rules(corpus: PlantedCorpus, schema_doc=None, scorer_marks_echo=False):
    """Transcript covering every agent role for a full optimization run.

    The extractor answers from the corpus's hidden generator; a label-echo
    feature, when present in the schema, is answered with the true label.
    """
    schema_doc = schema_doc or planted_schema_doc()
    names = [f["name"] for f in schema_doc["features"]]
    label_of = {
        ex.id: ex.label for ex in corpus.splits.train + corpus.splits.annotation
    }

    def extractor_answer(messages, ordinal):
        content = messages[-1]["content"]
        doc_id = _DOC_ID_RE.search(content).group(0)
        values = {}
        for name in names:
            if name == "sentiment_label":
                values[name] = label_of[doc_id]
            else:
                values[name] = corpus.truth[doc_id][name]
        return json.dumps(values)

    leaking = {"sentiment_label"} if scorer_marks_echo else set()
    return [
        rule(PROPOSE_MARK, schema_doc, role="system"),
        rule(EXTRACT_MARK, extractor_answer, role="system"),
        rule(INTERPRET_MARK, perfect_interpretability_reply(names, leaking), role="system"),
        rule(
            FEEDBACK_MARK,
            {"reasoning": "r", "feedback": "the planted color and trend features carry the signal"},
            role="system",
        ),
        rule(
            REFLECT_MARK,
            {
                "reasoning": "r",
                "instructions": [
                    f"Refined instruction {i}: describe concrete color and trend cues from the text"
                    for i in range(1, 9)
                ],
            },
            role="system",
        ),
    ]


def leaky_schema_doc() -> dict:
    """Planted schema trimmed to three clean features plus a label echo."""
    doc = planted_schema_doc()
    doc["features"] = doc["features"][:3] + [dict(LABEL_ECHO_FEATURE)]
    return doc


def clean_schema_doc() -> dict:
    doc = planted_schema_doc()
    doc["features"] = doc["features"][:3]
    return doc


def all_examples(corpus: PlantedCorpus):
    return list(corpus.splits.train) + list(corpus.splits.annotation)


def write_dataset_jsonl(corpus: PlantedCorpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in all_examples(corpus):
            fh.write(json.dumps({"id": ex.id, "text": ex.text, "label": ex.label}) + "\n")


def transcript_rules_doc(corpus: PlantedCorpus, schema_doc=None, unextractable_ids=()) -> list[dict]:
    """A fully static transcript document (loadable from a file): marker rules
    for the four helper roles, then one extractor rule per example answering
    from the hidden generator. Texts in unextractable_ids get a non-JSON
    refusal so their rows degrade to Missing values."""
    schema_doc = schema_doc or planted_schema_doc()
    names = [f["name"] for f in schema_doc["features"]]
    rules = [
        {"contains": PROPOSE_MARK, "role": "system", "response": schema_doc},
        {
            "contains": INTERPRET_MARK,
            "role": "system",
            "response": perfect_interpretability_reply(names),
        },
        {
            "contains": FEEDBACK_MARK,
            "role": "system",
            "response": {
                "reasoning": "r",
                "feedback": "the color and trend features carry most of the signal",
            },
        },
        {
            "contains": REFLECT_MARK,
            "role": "system",
            "response": {
                "reasoning": "r",
                "instructions": [
                    f"Refined instruction {i}: describe concrete color and trend cues"
                    for i in range(1, 9)
                ],
            },
        },
    ]
    for ex in all_examples(corpus):
        if ex.id in set(unextractable_ids):
            response = "these values cannot be determined"
        else:
            values = {}
            for name in names:
                values[name] = ex.label if name == "sentiment_label" else corpus.truth[ex.id][name]
            response = values
        rules.append({"contains": ex.id, "role": "user", "response": response})
    return rules


def write_transcript_file(corpus: PlantedCorpus, path, schema_doc=None, unextractable_ids=()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(transcript_rules_doc(corpus, schema_doc, unextractable_ids), fh)


def write_config_file(path, dataset_path, **overrides) -> None:
    values = {
        "dataset_path": str(dataset_path),
        "dataset_format": "jsonl",
        "train_per_class": 16,
        "annotation_size": 96,
        "seed": 7,
        "n_example_sets": 3,
        "examples_per_set": 8,
        "n_feedback_rounds": 1,
        "k_reflect": 4,
        "n_iter": 10,
        "k_folds": 4,
    }
    values.update(overrides)
    lines = [f"{k} = {json.dumps(v)}" for k, v in values.items() if v is not None]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
