"""Candidate evaluation and the full prompt search: seed evaluation,
reflective refinement rounds, then a categorical TPE search over
(instruction, example-set) pairs scored by lambda-blended F1 and
interpretability.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from random import Random
from typing import Callable, Sequence

from .agents import (
    DEFAULT_CHAR_BUDGET,
    DEFAULT_SEED_INSTRUCTION,
    ValidationFailed,
    build_data_summary,
    extract_all,
    performance_feedback,
    propose_features,
    reflect_instructions,
    score_interpretability,
)
from .gateway import GREEDY, GatewayError, GenerationParams, LmGateway, SchemaViolation
from .metrics import MetricsBundle, MetricsConfig, compute_metrics
from .model import (
    DatasetSplits,
    ExampleSet,
    FeatureSet,
    PromptCandidate,
    sample_example_sets,
    serialize_feature_schema,
    validate_feature_set,
)

PROPOSER_PARAMS = GenerationParams(temperature=0.75, top_p=0.95)

ABORT_PROPOSAL = "proposal-failed"
ABORT_EXTRACTION = "extraction-failed"
ABORT_INTERP = "interpretability-failed"
ABORT_GATEWAY = "gateway-unavailable"
INTERP_FAILED_FEEDBACK = "interpretability scoring failed"


class GatewayUnavailable(RuntimeError):
    """The backend was unreachable while bootstrapping the run."""


def combined_score(f1: float, interp: float, lam: float) -> float:
    """Blend classifier F1 with the interpretability set score.

    (f1 + lam*interp) / (1 + lam): stays in [0,1], strictly increasing in
    both arguments for lam > 0, and reduces to plain F1 at lam = 0.
    """
    if not (0.0 <= f1 <= 1.0) or not (0.0 <= interp <= 1.0):
        raise ValueError("f1 and interp must lie in [0, 1]")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return (f1 + lam * interp) / (1.0 + lam)


@dataclass(frozen=True)
class Instruction:
    text: str
    provenance: str  # "seed" | "reflective-round-N" | "scalar-round-N"


@dataclass
class SearchSpace:
    instructions: list[Instruction]
    example_sets: list[ExampleSet]

    def __post_init__(self) -> None:
        if not self.instructions or not self.example_sets:
            raise ValueError("instruction and example-set pools must be non-empty")
        texts = [i.text for i in self.instructions]
        if len(set(texts)) != len(texts):
            raise ValueError("instructions must be distinct")

    @property
    def product_size(self) -> int:
        return len(self.instructions) * len(self.example_sets)

    def all_pairs(self) -> list[tuple[int, int]]:
        return [
            (i, d)
            for i in range(len(self.instructions))
            for d in range(len(self.example_sets))
        ]


@dataclass(frozen=True)
class TrialRecord:
    index: int
    candidate: PromptCandidate
    instruction_text: str
    status: str  # "ok" | "aborted"
    abort_reason: str = ""
    combined_score: float | None = None
    f1_score: float | None = None
    interpretability_score: float | None = None
    feature_set: FeatureSet | None = None
    interp_feedback: str = ""
    perf_feedback: str = ""
    metrics: MetricsBundle | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    lm_calls: int = 0
    wall_time_s: float = 0.0
    started_at: str = ""

    def __post_init__(self) -> None:
        if (self.status == "ok") != (self.combined_score is not None):
            raise ValueError("combined_score must be present exactly when status is ok")

    def sampler_score(self) -> float:
        return self.combined_score if self.status == "ok" else 0.0

    def to_doc(self) -> dict:
        return {
            "index": self.index,
            "status": self.status,
            "abort_reason": self.abort_reason,
            "instruction_id": self.candidate.instruction_id,
            "example_set_id": self.candidate.example_set_id,
            "instruction_text": self.instruction_text,
            "combined_score": self.combined_score,
            "f1_score": self.f1_score,
            "interpretability_score": self.interpretability_score,
            "feature_set": (
                json.loads(serialize_feature_schema(self.feature_set))
                if self.feature_set
                else None
            ),
            "interp_feedback": self.interp_feedback,
            "perf_feedback": self.perf_feedback,
            "metrics": self.metrics.to_doc() if self.metrics else None,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "lm_calls": self.lm_calls,
            "wall_time_s": self.wall_time_s,
            "started_at": self.started_at,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "TrialRecord":
        return cls(
            index=doc["index"],
            candidate=PromptCandidate(doc["instruction_id"], doc["example_set_id"]),
            instruction_text=doc["instruction_text"],
            status=doc["status"],
            abort_reason=doc.get("abort_reason", ""),
            combined_score=doc.get("combined_score"),
            f1_score=doc.get("f1_score"),
            interpretability_score=doc.get("interpretability_score"),
            feature_set=(
                validate_feature_set(doc["feature_set"]) if doc.get("feature_set") else None
            ),
            interp_feedback=doc.get("interp_feedback", ""),
            perf_feedback=doc.get("perf_feedback", ""),
            metrics=(
                MetricsBundle.from_doc(doc["metrics"]) if doc.get("metrics") else None
            ),
            prompt_tokens=doc.get("prompt_tokens", 0),
            completion_tokens=doc.get("completion_tokens", 0),
            lm_calls=doc.get("lm_calls", 0),
            wall_time_s=doc.get("wall_time_s", 0.0),
            started_at=doc.get("started_at", ""),
        )


@dataclass(frozen=True)
class OptimizerConfig:
    seed: int = 0
    n_example_sets: int = 16  # how many example sets to sample up front
    examples_per_set: int = 16
    n_feedback_rounds: int = 1
    k_reflect: int = 4
    n_iter: int | None = None  # None -> max(n_example_sets^2, 128)
    lambda_: float = 0.75
    proposer_mode: str = "reflective"  # or "scalar_only"
    seed_instruction: str = DEFAULT_SEED_INSTRUCTION
    proposer_params: GenerationParams = PROPOSER_PARAMS
    helper_params: GenerationParams = GREEDY
    stratified_example_sets: bool = False
    metrics: MetricsConfig = MetricsConfig()
    char_budget: int = DEFAULT_CHAR_BUDGET
    gamma: float = 0.25
    pseudo_count: float = 1.0
    n_startup: int = 10
    tpe_enumeration_cap: int = 4096
    tpe_sample_candidates: int = 64

    def __post_init__(self) -> None:
        if min(self.n_example_sets, self.examples_per_set, self.k_reflect) < 1:
            raise ValueError("counts must be >= 1")
        if self.n_feedback_rounds < 0 or self.lambda_ < 0:
            raise ValueError("n_feedback_rounds and lambda must be >= 0")
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must be in (0, 1)")
        if self.pseudo_count <= 0:
            raise ValueError("pseudo_count must be > 0")
        if self.proposer_mode not in ("reflective", "scalar_only"):
            raise ValueError(f"unknown proposer mode {self.proposer_mode!r}")

    def resolved_n_iter(self) -> int:
        if self.n_iter is not None:
            return self.n_iter
        return max(self.n_example_sets**2, 128)


@dataclass
class TpeState:
    """History-dependent sampler state for the categorical TPE."""

    rng: Random
    gamma: float = 0.25
    pseudo_count: float = 1.0
    n_startup: int = 10
    trials: list[TrialRecord] = field(default_factory=list)

    @classmethod
    def from_config(cls, config: OptimizerConfig, trials: Sequence[TrialRecord] = ()) -> "TpeState":
        return cls(
            rng=Random(f"{config.seed}/tpe"),
            gamma=config.gamma,
            pseudo_count=config.pseudo_count,
            n_startup=config.n_startup,
            trials=list(trials),
        )


def _smoothed_density(counts: dict[int, int], total: int, size: int, pc: float) -> list[float]:
    return [(counts.get(v, 0) + pc) / (total + pc * size) for v in range(size)]


def tpe_suggest(
    state: TpeState,
    space: SearchSpace,
    enumeration_cap: int = 4096,
    sample_candidates: int = 64,
) -> PromptCandidate:
    """Suggest the next (instruction, example-set) pair.

    The first n_startup suggestions are uniform over unevaluated pairs
    (falling back to the full product once it is exhausted). Afterwards
    completed trials are split at the gamma quantile of combined score
    (aborted trials count as 0) into good and bad sets; each dimension gets
    smoothed categorical densities and the suggestion maximizes the
    good/bad ratio product, ties broken by lowest visit count, then RNG.
    """
    pairs = space.all_pairs()
    counts: dict[tuple[int, int], int] = {}
    for t in state.trials:
        counts[t.candidate.pair()] = counts.get(t.candidate.pair(), 0) + 1
    fresh = [p for p in pairs if p not in counts]

    if len(state.trials) < state.n_startup:
        pool = fresh if fresh else pairs
        return PromptCandidate(*pool[state.rng.randrange(len(pool))])

    scored = sorted(
        state.trials, key=lambda t: (-t.sampler_score(), t.index)
    )
    n_good = max(1, math.ceil(state.gamma * len(scored)))
    good, bad = scored[:n_good], scored[n_good:]

    def dim_densities(getter, size):
        g_counts: dict[int, int] = {}
        b_counts: dict[int, int] = {}
        for t in good:
            g_counts[getter(t)] = g_counts.get(getter(t), 0) + 1
        for t in bad:
            b_counts[getter(t)] = b_counts.get(getter(t), 0) + 1
        l = _smoothed_density(g_counts, len(good), size, state.pseudo_count)
        g = _smoothed_density(b_counts, len(bad), size, state.pseudo_count)
        return l, g

    l_i, g_i = dim_densities(lambda t: t.candidate.instruction_id, len(space.instructions))
    l_d, g_d = dim_densities(lambda t: t.candidate.example_set_id, len(space.example_sets))

    candidates = fresh if fresh else pairs
    if space.product_size > enumeration_cap and len(candidates) > sample_candidates:
        candidates = state.rng.sample(candidates, sample_candidates)

    best_pair = None
    best_key: tuple | None = None
    for pair in candidates:
        i, d = pair
        ratio = (l_i[i] / g_i[i]) * (l_d[d] / g_d[d])
        key = (ratio, -counts.get(pair, 0), state.rng.random())
        if best_key is None or key > best_key:
            best_key = key
            best_pair = pair
    return PromptCandidate(*best_pair)


def evaluate_candidate(
    index: int,
    cand: PromptCandidate,
    space: SearchSpace,
    splits: DatasetSplits,
    gateway: LmGateway,
    config: OptimizerConfig,
) -> TrialRecord:
    """Run one full candidate evaluation: propose, extract over the
    annotation split, score, and blend. Failures at any stage come back as
    an aborted TrialRecord (sampler score 0), never as an exception."""
    if not (0 <= cand.instruction_id < len(space.instructions)):
        raise ValueError(f"instruction_id {cand.instruction_id} out of range")
    if not (0 <= cand.example_set_id < len(space.example_sets)):
        raise ValueError(f"example_set_id {cand.example_set_id} out of range")

    tag = f"trial-{index}"
    started = time.time()
    started_at = datetime.now(timezone.utc).isoformat()
    instruction = space.instructions[cand.instruction_id]
    example_set = space.example_sets[cand.example_set_id]

    def finish(**kw) -> TrialRecord:
        usage = gateway.usage_for_candidate(tag)
        return TrialRecord(
            index=index,
            candidate=cand,
            instruction_text=instruction.text,
            prompt_tokens=usage.prompt_tokens,
            completion_tokens=usage.completion_tokens,
            lm_calls=usage.calls,
            wall_time_s=round(time.time() - started, 6),
            started_at=started_at,
            **kw,
        )

    try:
        fs = propose_features(
            gateway, instruction.text, example_set, config.proposer_params, tag, config.char_budget
        )
    except (SchemaViolation, ValidationFailed) as err:
        return finish(status="aborted", abort_reason=f"{ABORT_PROPOSAL}: {err}")
    except GatewayError as err:
        return finish(status="aborted", abort_reason=f"{ABORT_GATEWAY}: {err}")

    try:
        # transient per-row failures degrade inside extract(); anything that
        # escapes (e.g. an unmatched scripted request) is a hard abort with
        # the cause on record, never a silent default
        matrix = extract_all(
            gateway, splits.annotation, fs, config.helper_params, tag, config.char_budget
        )
    except GatewayError as err:
        return finish(
            status="aborted", abort_reason=f"{ABORT_EXTRACTION}: {err}", feature_set=fs
        )
    bundle = compute_metrics(matrix, config.metrics, class_names=splits.class_names)

    try:
        report = score_interpretability(
            gateway, fs, splits.class_names, bundle.leakage_hints(), config.helper_params, tag
        )
    except SchemaViolation:
        return finish(
            status="aborted",
            abort_reason=ABORT_INTERP,
            feature_set=fs,
            f1_score=bundle.macro_f1,
            metrics=bundle,
            interp_feedback=INTERP_FAILED_FEEDBACK,
        )
    except GatewayError as err:
        return finish(
            status="aborted",
            abort_reason=f"{ABORT_GATEWAY}: {err}",
            feature_set=fs,
            f1_score=bundle.macro_f1,
            metrics=bundle,
        )

    perf_text = performance_feedback(gateway, bundle, config.helper_params, tag)
    score = combined_score(bundle.macro_f1, report.set_score, config.lambda_)
    return finish(
        status="ok",
        combined_score=score,
        f1_score=bundle.macro_f1,
        interpretability_score=report.set_score,
        feature_set=fs,
        interp_feedback=report.feedback_text,
        perf_feedback=perf_text,
        metrics=bundle,
    )


@dataclass
class OptimizeResult:
    best: TrialRecord | None
    trials: list[TrialRecord]
    feature_set: FeatureSet | None
    space: SearchSpace


def best_trial(trials: Sequence[TrialRecord]) -> TrialRecord | None:
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        return None
    return max(ok, key=lambda t: (t.combined_score, -t.index))


def _round_number(provenance: str) -> int:
    if provenance.startswith(("reflective-round-", "scalar-round-")):
        return int(provenance.rsplit("-", 1)[1])
    return 0


def optimize(
    splits: DatasetSplits,
    gateway: LmGateway,
    config: OptimizerConfig,
    trial_sink: Callable[[TrialRecord], None] | None = None,
    instruction_sink: Callable[[int, Instruction], None] | None = None,
    prior_trials: Sequence[TrialRecord] = (),
    prior_instructions: Sequence[Instruction] = (),
) -> OptimizeResult:
    """Full search per the three-step recipe: sample example sets, bootstrap
    feedback with the seed instruction, refine instructions for
    n_feedback_rounds, then spend the remaining trial budget on TPE over the
    instruction-by-example-set product, deduplicating pairs.

    The total number of evaluated pairs never exceeds
    min(resolved_n_iter(), |instruction pool| * n_example_sets) and every
    pair is evaluated at most once. Every trial is handed to trial_sink
    before the next one starts. prior_trials/prior_instructions replay a
    previously persisted run so an interrupted search can continue.
    """
    example_sets = sample_example_sets(
        splits.train,
        config.n_example_sets,
        config.examples_per_set,
        config.seed,
        config.stratified_example_sets,
    )

    instructions = list(prior_instructions)
    if not instructions:
        instructions = [Instruction(config.seed_instruction, "seed")]
        if instruction_sink:
            instruction_sink(0, instructions[0])
    elif instructions[0].text != config.seed_instruction:
        raise ValueError("replayed instruction pool does not start with the seed instruction")

    space = SearchSpace(instructions=instructions, example_sets=example_sets)
    trials: list[TrialRecord] = list(prior_trials)

    def record(trial: TrialRecord) -> None:
        trials.append(trial)
        if trial_sink:
            trial_sink(trial)

    def latest_feedback() -> tuple[str, str, float, str]:
        for t in reversed(trials):
            if t.status == "ok":
                return (t.interp_feedback, t.perf_feedback, t.combined_score, t.instruction_text)
        return ("no interpretability feedback available", "no performance feedback available", 0.0, config.seed_instruction)

    # Step 2: bootstrap feedback by evaluating the seed instruction on set 0.
    if not trials:
        trial0 = evaluate_candidate(0, PromptCandidate(0, 0), space, splits, gateway, config)
        record(trial0)
        if trial0.status == "aborted" and trial0.abort_reason.startswith(ABORT_GATEWAY):
            raise GatewayUnavailable(trial0.abort_reason)

    # Step 3: instruction refinement rounds.
    summary = build_data_summary(splits.train, config.seed)
    mode_tag = "reflective" if config.proposer_mode == "reflective" else "scalar"
    rounds_done = max((_round_number(i.provenance) for i in instructions), default=0)
    for r in range(rounds_done + 1, config.n_feedback_rounds + 1):
        interp_fb, perf_fb, score, current = latest_feedback()
        proposals = reflect_instructions(
            gateway,
            summary,
            current,
            interp_fb,
            perf_fb,
            score=score,
            k=config.k_reflect,
            mode=config.proposer_mode,
            params=config.helper_params,
            candidate=f"round-{r}",
        )
        existing = {i.text for i in instructions}
        fresh_texts = [t for t in proposals if t not in existing]
        first_new_index: int | None = None
        for text in fresh_texts:
            instr = Instruction(text, f"{mode_tag}-round-{r}")
            if first_new_index is None:
                first_new_index = len(instructions)
            if instruction_sink:
                instruction_sink(len(instructions), instr)
            instructions.append(instr)
        if first_new_index is not None:
            # one extra evaluation per round: the top-ranked new instruction
            refresh = evaluate_candidate(
                len(trials), PromptCandidate(first_new_index, 0), space, splits, gateway, config
            )
            record(refresh)

    # Step 4: TPE search over the remaining budget, each pair at most once.
    # The state shares the live trial list so every completed trial feeds the
    # next suggestion.
    budget = max(config.resolved_n_iter() - len(trials), 0)
    state = TpeState(
        rng=Random(f"{config.seed}/tpe"),
        gamma=config.gamma,
        pseudo_count=config.pseudo_count,
        n_startup=config.n_startup,
        trials=trials,
    )
    evaluated = {t.candidate.pair() for t in trials}
    for _ in range(budget):
        if len(evaluated) >= space.product_size:
            break
        cand = tpe_suggest(
            state, space, config.tpe_enumeration_cap, config.tpe_sample_candidates
        )
        if cand.pair() in evaluated:
            break
        trial = evaluate_candidate(len(trials), cand, space, splits, gateway, config)
        record(trial)
        evaluated.add(cand.pair())

    best = best_trial(trials)
    return OptimizeResult(
        best=best,
        trials=trials,
        feature_set=best.feature_set if best else None,
        space=space,
    )
