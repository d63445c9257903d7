"""Run configuration: a flat, human-editable key-value file (TOML-style)
with ${VAR} environment interpolation for secrets, shipped defaults, and
conversion into the optimizer's config types.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

from .agents import DEFAULT_CHAR_BUDGET, DEFAULT_SEED_INSTRUCTION
from .gateway import GenerationParams, LmEndpoint
from .metrics import MetricsConfig
from .optimizer import OptimizerConfig


class ConfigError(ValueError):
    pass


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _strip_trailing_comment(raw: str) -> str:
    in_string = False
    for i, ch in enumerate(raw):
        if ch == '"' and (i == 0 or raw[i - 1] != "\\"):
            in_string = not in_string
        elif ch == "#" and not in_string:
            return raw[:i]
    return raw


def parse_flat_toml(text: str) -> dict[str, Any]:
    """Parse a flat TOML-style document: `key = value` lines, # comments,
    values limited to strings, numbers, booleans, and flat arrays."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not re.fullmatch(r"[A-Za-z0-9_.-]+", key):
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        raw = _strip_trailing_comment(raw).strip()
        try:
            value = json.loads(raw)
        except ValueError as err:
            raise ConfigError(f"line {lineno}: cannot parse value {raw!r}: {err}") from err
        if isinstance(value, dict):
            raise ConfigError(f"line {lineno}: nested tables are not supported")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def interpolate_env(value: Any) -> Any:
    if not isinstance(value, str):
        return value

    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in os.environ:
            raise ConfigError(f"environment variable {name} is not set")
        return os.environ[name]

    return _ENV_RE.sub(sub, value)


@dataclass
class RunConfig:
    """Everything a run needs, flattened. Field names double as config keys
    (the file key `lambda` maps onto lambda_)."""

    # dataset
    dataset_path: str = "dataset.jsonl"
    dataset_format: str = "jsonl"  # jsonl | csv
    train_per_class: int = 16
    annotation_size: int = 512
    # endpoint
    endpoint_base_url: str = ""
    model_id: str = ""
    api_key_env: str = ""
    request_timeout: float = 120.0
    max_retries: int = 2
    max_in_flight: int = 4
    parse_retries: int = 2
    # search
    seed: int = 0
    n_example_sets: int = 16
    examples_per_set: int = 16
    n_feedback_rounds: int = 1
    k_reflect: int = 4
    n_iter: int | None = None  # None -> max(n_example_sets^2, 128)
    lambda_: float = 0.75
    proposer_mode: str = "reflective"
    seed_instruction: str = DEFAULT_SEED_INSTRUCTION
    stratified_example_sets: bool = False
    # executor
    k_folds: int = 5
    l2: float = 1.0
    logreg_tol: float = 1e-6
    logreg_max_iter: int = 1000
    leakage_mi_threshold: float = 0.95
    # sampler
    gamma: float = 0.25
    n_startup: int = 10
    tpe_pseudo_count: float = 1.0
    # generation
    proposer_temperature: float = 0.75
    proposer_top_p: float = 0.95
    proposer_max_tokens: int = 2048
    helper_temperature: float = 0.0
    helper_top_p: float = 1.0
    helper_max_tokens: int = 2048
    char_budget: int = DEFAULT_CHAR_BUDGET
    # cost model (relative model-size units)
    cost_model_size_propose: float = 1.0
    cost_model_size_extract: float = 1.0
    cost_model_size_score: float = 1.0

    def __post_init__(self) -> None:
        counts = {
            "train_per_class": self.train_per_class,
            "annotation_size": self.annotation_size,
            "n_example_sets": self.n_example_sets,
            "examples_per_set": self.examples_per_set,
            "k_reflect": self.k_reflect,
            "k_folds": self.k_folds,
            "max_in_flight": self.max_in_flight,
            "n_startup": self.n_startup,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.n_iter is not None and self.n_iter < 1:
            raise ConfigError("n_iter must be >= 1 when given")
        if self.lambda_ < 0:
            raise ConfigError("lambda must be >= 0")
        if self.n_feedback_rounds < 0:
            raise ConfigError("n_feedback_rounds must be >= 0")
        if self.proposer_mode not in ("reflective", "scalar_only"):
            raise ConfigError(f"unknown proposer_mode {self.proposer_mode!r}")
        if self.dataset_format not in ("jsonl", "csv"):
            raise ConfigError(f"unknown dataset_format {self.dataset_format!r}")

    def resolved_n_iter(self) -> int:
        return self.n_iter if self.n_iter is not None else max(self.n_example_sets**2, 128)

    def proposer_params(self) -> GenerationParams:
        return GenerationParams(
            temperature=self.proposer_temperature,
            top_p=self.proposer_top_p,
            max_tokens=self.proposer_max_tokens,
        )

    def helper_params(self) -> GenerationParams:
        return GenerationParams(
            temperature=self.helper_temperature,
            top_p=self.helper_top_p,
            max_tokens=self.helper_max_tokens,
        )

    def metrics_config(self) -> MetricsConfig:
        return MetricsConfig(
            k_folds=self.k_folds,
            l2=self.l2,
            tol=self.logreg_tol,
            max_iter=self.logreg_max_iter,
            seed=self.seed,
            leakage_mi_threshold=self.leakage_mi_threshold,
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            seed=self.seed,
            n_example_sets=self.n_example_sets,
            examples_per_set=self.examples_per_set,
            n_feedback_rounds=self.n_feedback_rounds,
            k_reflect=self.k_reflect,
            n_iter=self.n_iter,
            lambda_=self.lambda_,
            proposer_mode=self.proposer_mode,
            seed_instruction=self.seed_instruction,
            proposer_params=self.proposer_params(),
            helper_params=self.helper_params(),
            stratified_example_sets=self.stratified_example_sets,
            metrics=self.metrics_config(),
            char_budget=self.char_budget,
            gamma=self.gamma,
            pseudo_count=self.tpe_pseudo_count,
            n_startup=self.n_startup,
        )

    def endpoint(self) -> LmEndpoint:
        if not self.endpoint_base_url or not self.model_id:
            raise ConfigError(
                "endpoint_base_url and model_id are required unless a scripted LM is used"
            )
        api_key = None
        if self.api_key_env:
            if self.api_key_env not in os.environ:
                raise ConfigError(f"environment variable {self.api_key_env} is not set")
            api_key = os.environ[self.api_key_env]
        return LmEndpoint(
            base_url=self.endpoint_base_url,
            model_id=self.model_id,
            api_key=api_key,
            request_timeout=self.request_timeout,
            max_retries=self.max_retries,
            max_in_flight=self.max_in_flight,
        )

    def to_doc(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["lambda"] = doc.pop("lambda_")
        return dict(sorted(doc.items()))

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_doc(), sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    values: dict[str, Any] = {}
    for key, value in raw.items():
        field = "lambda_" if key == "lambda" else key
        if field not in _FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        values[field] = interpolate_env(value)
    return RunConfig(**values)


def default_config() -> RunConfig:
    """The shipped default configuration asset."""
    text = resources.files("featforge.data").joinpath("default.toml").read_text("utf-8")
    return config_from_dict(parse_flat_toml(text))


def load_config(path: str | Path, check_files: bool = True) -> RunConfig:
    """Load a run config file, resolving the dataset path relative to it.

    Raises:
        ConfigError: unparseable file, unknown keys, invalid values, or a
            missing dataset file when check_files is set.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    config = config_from_dict(parse_flat_toml(path.read_text("utf-8")))
    dataset = Path(config.dataset_path)
    if not dataset.is_absolute():
        dataset = path.parent / dataset
        config.dataset_path = str(dataset)
    if check_files and not dataset.exists():
        raise ConfigError(f"dataset file {dataset} does not exist")
    return config
