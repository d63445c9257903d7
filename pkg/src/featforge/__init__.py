"""featforge: discovers interpretable, discriminative feature schemas from
labelled text corpora by optimizing the prompt of a feature-proposing LM agent
against a dataset-level objective (classifier F1 regularized by an
interpretability score)."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    DatasetSplits,
    ExampleSet,
    FeatureDefinition,
    FeatureKind,
    FeatureMatrix,
    FeatureSet,
    FeatureValue,
    FeatureValueType,
    LabeledExample,
    PromptCandidate,
    parse_feature_schema,
    sample_example_sets,
    serialize_feature_schema,
    validate_feature_set,
)
from .gateway import (  # noqa: F401
    GenerationParams,
    HttpLm,
    LmEndpoint,
    LmGateway,
    ScriptedLm,
    TokenUsage,
)
from .metrics import (  # noqa: F401
    MetricsBundle,
    MetricsConfig,
    compute_metrics,
    coverage,
    cross_validated_f1,
    detect_leakage,
    encode,
    linear_shap,
    mutual_information,
    train_logreg,
)
from .optimizer import (  # noqa: F401
    OptimizerConfig,
    OptimizeResult,
    SearchSpace,
    TpeState,
    TrialRecord,
    combined_score,
    evaluate_candidate,
    optimize,
    tpe_suggest,
)
from .costmodel import CostBreakdown, CostParams, estimate_cost, reconcile  # noqa: F401
from .config import RunConfig, default_config, load_config  # noqa: F401
from .ingest import ingest, read_examples  # noqa: F401
