"""Domain-type invariants, schema validation, sampling, and serialization."""

from __future__ import annotations

import pytest

from featforge.model import (
    DatasetSplits,
    FeatureKind,
    FeatureMatrix,
    FeatureSet,
    FeatureValue,
    FeatureValueType,
    LabeledExample,
    MatrixRow,
    SchemaValidationError,
    TrainTooSmall,
    coerce_value,
    content_hash_id,
    parse_feature_schema,
    sample_example_sets,
    serialize_feature_schema,
    validate_feature_set,
)

from conftest import bool_feat


def feature_doc(name="job_loss_indicator", ftype="bool", **extra):
    doc = {
        "name": name,
        "type": ftype,
        "description": "the text reports job losses",
        "extraction_prompt": "Does the text report job losses?",
    }
    doc.update(extra)
    return doc


class TestValidateFeatureSet:
    def test_single_boolean_feature_is_valid(self):
        fs = validate_feature_set({"features": [feature_doc()]})
        assert len(fs) == 1
        assert fs[0].name == "job_loss_indicator"
        assert fs[0].value_type.kind is FeatureKind.BOOLEAN

    def test_duplicate_names_are_a_violation(self):
        with pytest.raises(SchemaValidationError) as exc:
            validate_feature_set([feature_doc("tone"), feature_doc("tone")])
        assert any(v.code == "DuplicateName" for v in exc.value.violations)

    def test_single_category_literal_is_bad_arity(self):
        doc = feature_doc("mood", "literal", categories=["happy"])
        with pytest.raises(SchemaValidationError) as exc:
            validate_feature_set([doc])
        assert any(v.code == "BadCategoricalArity" for v in exc.value.violations)

    def test_empty_list_rejected(self):
        with pytest.raises(SchemaValidationError) as exc:
            validate_feature_set({"features": []})
        assert exc.value.violations[0].code == "EmptyFeatureList"

    def test_bad_identifier_rejected(self):
        with pytest.raises(SchemaValidationError) as exc:
            validate_feature_set([feature_doc("Bad Name")])
        assert any(v.code == "BadIdentifier" for v in exc.value.violations)

    def test_all_violations_reported_not_just_first(self):
        docs = [
            feature_doc("CamelCase"),
            feature_doc("ok_name", "literal", categories=["one"]),
            feature_doc("ok_name2", description=""),
        ]
        with pytest.raises(SchemaValidationError) as exc:
            validate_feature_set(docs)
        codes = {v.code for v in exc.value.violations}
        assert {"BadIdentifier", "BadCategoricalArity", "EmptyText"} <= codes

    def test_python_type_aliases_accepted(self):
        docs = [
            feature_doc("a", "bool"),
            feature_doc("b", "int"),
            feature_doc("c", "float"),
            feature_doc("d", "literal", categories=["x", "y"]),
        ]
        fs = validate_feature_set(docs)
        kinds = [f.value_type.kind for f in fs.features]
        assert kinds == [
            FeatureKind.BOOLEAN,
            FeatureKind.INTEGER,
            FeatureKind.REAL,
            FeatureKind.CATEGORICAL,
        ]


class TestSerialization:
    def _sample_set(self):
        return validate_feature_set(
            [
                feature_doc("roleplay_instruction"),
                feature_doc("risk_tone", "literal", categories=["calm", "alarmed"]),
                feature_doc("anger_level", "float"),
            ]
        )

    def test_round_trip_is_identity(self):
        fs = self._sample_set()
        assert parse_feature_schema(serialize_feature_schema(fs)) == fs

    def test_serialization_is_byte_stable(self):
        fs = self._sample_set()
        assert serialize_feature_schema(fs) == serialize_feature_schema(fs)

    def test_round_trip_many_random_sets(self):
        import random

        rng = random.Random(0)
        kinds = ["bool", "int", "float", "literal"]
        for _ in range(25):
            docs = []
            for i in range(rng.randint(1, 8)):
                k = rng.choice(kinds)
                extra = {}
                if k == "literal":
                    extra["categories"] = [f"c{j}" for j in range(rng.randint(2, 5))]
                docs.append(feature_doc(f"feat_{i}", k, **extra))
            fs = validate_feature_set(docs)
            assert parse_feature_schema(serialize_feature_schema(fs)) == fs


class TestCoerceValue:
    def test_boolean_coercions(self):
        vt = FeatureValueType(FeatureKind.BOOLEAN)
        assert coerce_value(True, vt).value is True
        assert coerce_value("false", vt).value is False
        assert coerce_value(1, vt).value is True
        assert coerce_value("maybe", vt).is_missing

    def test_categorical_out_of_vocabulary(self):
        vt = FeatureValueType(FeatureKind.CATEGORICAL, ("calm", "alarmed"))
        assert coerce_value("calm", vt).value == "calm"
        assert coerce_value("CALM", vt).value == "calm"
        got = coerce_value("angry", vt)
        assert got.is_missing and got.reason == "out-of-vocabulary"

    def test_numeric_coercions(self):
        assert coerce_value("42", FeatureValueType(FeatureKind.INTEGER)).value == 42
        assert coerce_value(2.0, FeatureValueType(FeatureKind.INTEGER)).value == 2
        assert coerce_value(2.5, FeatureValueType(FeatureKind.INTEGER)).is_missing
        assert coerce_value("0.25", FeatureValueType(FeatureKind.REAL)).value == 0.25
        assert coerce_value(float("nan"), FeatureValueType(FeatureKind.REAL)).is_missing

    def test_null_is_parse_failed(self):
        got = coerce_value(None, FeatureValueType(FeatureKind.BOOLEAN))
        assert got.is_missing and got.reason == "parse-failed"


def _train(n=48, n_classes=3):
    return [
        LabeledExample(id=f"t{i}", text=f"text number {i}", label=f"c{i % n_classes}")
        for i in range(n)
    ]


class TestSampleExampleSets:
    def test_paper_shape_sixteen_sets_of_sixteen(self):
        sets = sample_example_sets(_train(48), n_sets=16, l=16, seed=1)
        assert len(sets) == 16
        assert all(len(s.examples) == 16 for s in sets)
        for s in sets:
            ids = [e.id for e in s.examples]
            assert len(set(ids)) == 16  # within-set sampling is without replacement

    def test_exhaustive_sample_equals_train_up_to_order(self):
        train = _train(10)
        (s,) = sample_example_sets(train, n_sets=1, l=10, seed=5)
        assert sorted(e.id for e in s.examples) == sorted(e.id for e in train)

    def test_same_seed_is_deterministic(self):
        a = sample_example_sets(_train(30), 4, 8, seed=99)
        b = sample_example_sets(_train(30), 4, 8, seed=99)
        assert [[e.id for e in s.examples] for s in a] == [
            [e.id for e in s.examples] for s in b
        ]

    def test_different_seed_differs(self):
        a = sample_example_sets(_train(30), 4, 8, seed=1)
        b = sample_example_sets(_train(30), 4, 8, seed=2)
        assert [[e.id for e in s.examples] for s in a] != [
            [e.id for e in s.examples] for s in b
        ]

    def test_train_too_small(self):
        with pytest.raises(TrainTooSmall):
            sample_example_sets(_train(5), 1, 6, seed=0)

    def test_stratified_mode_balances_classes(self):
        sets = sample_example_sets(_train(48), 3, 15, seed=0, stratified=True)
        for s in sets:
            counts = {}
            for e in s.examples:
                counts[e.label] = counts.get(e.label, 0) + 1
            assert set(counts.values()) == {5}


class TestDomainInvariants:
    def test_splits_must_be_disjoint(self):
        ex = LabeledExample("a", "text", "x")
        with pytest.raises(ValueError, match="share ids"):
            DatasetSplits(train=(ex,), annotation=(ex,), class_names=("x", "y"))

    def test_labels_must_be_in_vocabulary(self):
        ex = LabeledExample("a", "text", "zzz")
        with pytest.raises(ValueError, match="outside the class vocabulary"):
            DatasetSplits(train=(ex,), annotation=(), class_names=("x", "y"))

    def test_ragged_matrix_rejected(self):
        fs = FeatureSet((bool_feat("a"), bool_feat("b")))
        row = MatrixRow("r1", "x", (FeatureValue.boolean(True),))
        with pytest.raises(ValueError, match="ragged"):
            FeatureMatrix(fs, (row,))

    def test_duplicate_row_ids_rejected(self):
        fs = FeatureSet((bool_feat("a"),))
        rows = tuple(
            MatrixRow("r1", "x", (FeatureValue.boolean(True),)) for _ in range(2)
        )
        with pytest.raises(ValueError, match="distinct"):
            FeatureMatrix(fs, rows)

    def test_categorical_value_outside_categories(self):
        vt = FeatureValueType(FeatureKind.CATEGORICAL, ("a", "b"))
        assert coerce_value("c", vt).is_missing

    def test_content_hash_ids_are_stable_and_distinct(self):
        assert content_hash_id("same text", "x") == content_hash_id("same text", "x")
        assert content_hash_id("same text", "x") != content_hash_id("other text", "x")

    def test_feature_value_json_round_trip(self):
        vt = FeatureValueType(FeatureKind.REAL)
        v = FeatureValue.real(1.5)
        assert FeatureValue.from_json(v.to_json(), vt) == v
        miss = FeatureValue.missing("parse-failed")
        again = FeatureValue.from_json(miss.to_json(), vt)
        assert again.is_missing and again.reason == "parse-failed"

    def test_categories_capped_and_unique(self):
        with pytest.raises(ValueError):
            FeatureValueType(FeatureKind.CATEGORICAL, ("a",))
        with pytest.raises(ValueError):
            FeatureValueType(FeatureKind.CATEGORICAL, ("a", "a"))
        with pytest.raises(ValueError):
            FeatureValueType(FeatureKind.BOOLEAN, ("a", "b"))

    def test_feature_set_caps(self):
        feats = tuple(bool_feat(f"f{i}") for i in range(33))
        with pytest.raises(ValueError):
            FeatureSet(feats)

    def test_example_set_overlap_across_sets_is_allowed(self):
        train = _train(8)
        sets = sample_example_sets(train, n_sets=6, l=8, seed=0)
        # every set must reuse the whole train split here, so overlap is total
        for s in sets:
            assert sorted(e.id for e in s.examples) == sorted(e.id for e in train)
