"""Command-line entry points: optimize, extract, evaluate, compare, cost."""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, prompts
from .agents import extract_all, render_metrics_table
from .config import ConfigError, RunConfig, load_config
from .costmodel import CostParams, estimate_cost, reconcile
from .gateway import (
    GatewayError,
    GenerationParams,
    HttpLm,
    LmGateway,
    ScriptedLm,
    UsageTotals,
    proxy_token_count,
    system,
    user,
)
from .ingest import IngestError, MalformedRecord, read_examples, ingest
from .metrics import (
    MetricsConfig,
    TooFewPerClass,
    compute_metrics,
)
from .model import (
    FeatureMatrix,
    FeatureSet,
    FeatureValue,
    MatrixRow,
    SchemaValidationError,
    serialize_feature_schema,
    validate_feature_set,
)
from .optimizer import GatewayUnavailable, OptimizeResult, best_trial, optimize
from .report import write_comparison, write_report
from .rundir import RunDir, RunDirError

PROBE_PARAMS = GenerationParams(temperature=0.0, top_p=1.0, max_tokens=8)


class CliError(RuntimeError):
    pass


def _err(message: str) -> None:
    print(f"featforge: error: {message}", file=sys.stderr)


def _build_backend(config: RunConfig | None, scripted_path: str | None):
    if scripted_path:
        return ScriptedLm.from_file(scripted_path)
    if config is None:
        raise CliError("either --scripted-lm or a config with endpoint settings is required")
    return HttpLm(config.endpoint())


def _probe_endpoint(backend) -> None:
    """One tiny completion against a fresh throwaway gateway; raises
    GatewayError when the endpoint is unreachable."""
    probe = LmGateway(backend, max_retries=0)
    probe.complete(
        [system("connectivity probe"), user("ping")], PROBE_PARAMS, role="probe"
    )


def _usage_doc(gateway: LmGateway) -> dict:
    by_role = {
        role: {
            "prompt_tokens": t.prompt_tokens,
            "completion_tokens": t.completion_tokens,
            "calls": t.calls,
        }
        for role, t in sorted(gateway.totals_by_role().items())
    }
    by_candidate = {
        f"{role}/{cand}": {
            "prompt_tokens": t.prompt_tokens,
            "completion_tokens": t.completion_tokens,
            "calls": t.calls,
        }
        for (role, cand), t in sorted(gateway.usage_ledger().items())
    }
    return {"by_role": by_role, "by_candidate": by_candidate}


def _usage_by_role_from_doc(doc: dict) -> dict[str, UsageTotals]:
    return {
        role: UsageTotals(v["prompt_tokens"], v["completion_tokens"], v["calls"])
        for role, v in doc.get("by_role", {}).items()
    }


def _cost_breakdown(config: RunConfig, splits, feature_set: FeatureSet | None):
    texts = [ex.text for ex in splits.annotation] or [ex.text for ex in splits.train]
    l_t = max(sum(proxy_token_count(t) for t in texts) / max(len(texts), 1), 1.0)
    l_f = (
        proxy_token_count(serialize_feature_schema(feature_set))
        if feature_set
        else 400.0
    )
    l_phi = proxy_token_count(config.seed_instruction) + config.examples_per_set * l_t
    params = CostParams(
        m_fp=config.cost_model_size_propose,
        m_e=config.cost_model_size_extract,
        m_s=config.cost_model_size_score,
        l_phi=l_phi,
        l_t=l_t,
        l_f=max(l_f, 1.0),
        n_a=len(splits.annotation),
        n_d=config.n_example_sets,
        n_iter=config.resolved_n_iter(),
    )
    return estimate_cost(params)


def _best_doc(result: OptimizeResult) -> dict:
    best = result.best
    return {
        "trial_index": best.index,
        "instruction_id": best.candidate.instruction_id,
        "example_set_id": best.candidate.example_set_id,
        "instruction": best.instruction_text,
        "combined_score": best.combined_score,
        "f1_score": best.f1_score,
        "interpretability_score": best.interpretability_score,
        "features": json.loads(serialize_feature_schema(best.feature_set))["features"],
    }


def _manifest_doc(config: RunConfig, model_id: str) -> dict:
    return {
        "package_version": __version__,
        "config": config.to_doc(),
        "config_digest": config.digest(),
        "prompt_templates": prompts.template_versions(),
        "model_id": model_id,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }


def cmd_optimize(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.mode:
        config.proposer_mode = "scalar_only" if args.mode == "scalar" else "reflective"

    backend = _build_backend(config if not args.scripted_lm else None, args.scripted_lm)
    if not args.scripted_lm:
        # fail before creating the run directory so a dead endpoint leaves
        # nothing half-written behind
        try:
            _probe_endpoint(backend)
        except GatewayError as err:
            _err(f"endpoint unreachable: {err}")
            return 2

    splits = ingest(
        config.dataset_path,
        config.dataset_format,
        config.train_per_class,
        config.annotation_size,
        config.seed,
    )

    rd = RunDir(args.run_dir)
    prior_trials, prior_instructions = [], []
    if rd.has_manifest():
        manifest = rd.read_manifest()
        if manifest.get("config_digest") != config.digest():
            _err(
                f"run directory {rd.path} was created with a different "
                f"configuration; refusing to resume"
            )
            return 2
        prior_trials, truncated = rd.read_trials()
        if truncated:
            print(
                f"featforge: warning: {rd.path / 'trials.jsonl'} ends in a "
                f"truncated record (crash); dropping the partial line",
                file=sys.stderr,
            )
        prior_instructions = rd.read_instructions()
        if prior_trials:
            print(f"featforge: resuming from {len(prior_trials)} completed trials")

    gateway = LmGateway(backend)
    with rd:
        if not rd.has_manifest():
            rd.write_manifest(_manifest_doc(config, backend.model_id))
        try:
            result = optimize(
                splits,
                gateway,
                config.optimizer_config(),
                trial_sink=rd.append_trial,
                instruction_sink=rd.append_instruction,
                prior_trials=prior_trials,
                prior_instructions=prior_instructions,
            )
        except GatewayUnavailable as err:
            _err(f"gateway unavailable while bootstrapping: {err}")
            return 2

        rd.write_usage(_usage_doc(gateway))
        breakdown = _cost_breakdown(config, splits, result.feature_set)
        reconciliation = reconcile(gateway.totals_by_role(), breakdown)
        if result.best is not None:
            rd.write_best(_best_doc(result))
        write_report(rd.path, result, config.to_doc(), breakdown, reconciliation)

    ok = sum(1 for t in result.trials if t.status == "ok")
    print(
        f"featforge: {len(result.trials)} trials ({ok} ok); artifacts in {rd.path}"
    )
    if result.best is None:
        _err("no trial completed successfully")
        return 3
    print(
        f"featforge: best combined score {result.best.combined_score:.4f} "
        f"(trial {result.best.index})"
    )
    return 0


def _load_feature_set(path: str) -> FeatureSet:
    return validate_feature_set(json.loads(Path(path).read_text("utf-8")))


def cmd_extract(args) -> int:
    fs = _load_feature_set(args.features)
    config = load_config(args.config, check_files=False) if args.config else None
    backend = _build_backend(config, args.scripted_lm)
    gateway = LmGateway(backend)
    examples = read_examples(args.dataset, args.format, require_label=False)
    if not examples:
        _err("dataset contains no examples")
        return 2
    matrix = extract_all(gateway, examples, fs, candidate="extract-cli")
    out = Path(args.output)
    with open(out, "w", encoding="utf-8") as fh:
        for row in matrix.rows:
            doc = {"id": row.example_id}
            if row.label:
                doc["label"] = row.label
            doc["values"] = {
                feat.name: value.to_json()
                for feat, value in zip(fs.features, row.values)
            }
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
    print(f"featforge: wrote {len(matrix.rows)} feature rows to {out}")
    return 0


def _infer_value_type(name: str, observed: list) -> dict:
    kinds = {type(v) for v in observed}
    if kinds <= {bool}:
        ftype = "bool"
    elif kinds <= {int, bool}:
        ftype = "int"
    elif kinds <= {int, float, bool}:
        ftype = "float"
    else:
        cats = sorted({str(v) for v in observed})
        return {
            "name": name,
            "type": "literal",
            "categories": cats if len(cats) >= 2 else cats + ["<other>"],
            "description": "inferred from realized values",
            "extraction_prompt": "inferred from realized values",
        }
    return {
        "name": name,
        "type": ftype,
        "description": "inferred from realized values",
        "extraction_prompt": "inferred from realized values",
    }


def read_feature_rows(path: str | Path) -> list[dict]:
    rows = []
    for line_no, line in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except ValueError as err:
            raise MalformedRecord(line_no, f"invalid JSON: {err}") from err
        if "values" not in doc or not isinstance(doc["values"], dict):
            raise MalformedRecord(line_no, "missing 'values' object")
        if "id" not in doc:
            doc["id"] = f"row{line_no:06d}"
        rows.append(doc)
    return rows


def matrix_from_rows(rows: list[dict], fs: FeatureSet) -> FeatureMatrix:
    matrix_rows = []
    for doc in rows:
        values = tuple(
            FeatureValue.from_json(doc["values"].get(f.name), f.value_type)
            for f in fs.features
        )
        matrix_rows.append(MatrixRow(doc["id"], doc.get("label", ""), values))
    return FeatureMatrix(feature_set=fs, rows=tuple(matrix_rows))


def cmd_evaluate(args) -> int:
    rows = read_feature_rows(args.features)
    if not rows:
        _err("features file contains no rows")
        return 2
    missing_labels = [r["id"] for r in rows if not r.get("label")]
    if missing_labels:
        _err(f"rows without labels cannot be evaluated (first: {missing_labels[0]})")
        return 2

    if args.schema:
        fs = _load_feature_set(args.schema)
    else:
        names = list(rows[0]["values"])
        docs = []
        for name in names:
            observed = [
                r["values"][name]
                for r in rows
                if not isinstance(r["values"].get(name), dict)
                and r["values"].get(name) is not None
            ]
            docs.append(_infer_value_type(name, observed))
        fs = validate_feature_set(docs)

    labels = {r["label"] for r in rows}
    counts = {c: sum(1 for r in rows if r["label"] == c) for c in labels}
    if len(labels) < 2 or min(counts.values()) < args.k_folds:
        _err(
            f"evaluation needs >= 2 classes with >= {args.k_folds} members each, "
            f"got {dict(sorted(counts.items()))}"
        )
        return 4

    matrix = matrix_from_rows(rows, fs)
    bundle = compute_metrics(
        matrix, MetricsConfig(k_folds=args.k_folds, seed=args.seed or 0)
    )
    table = render_metrics_table(bundle)
    print(table)
    if args.output:
        Path(args.output).write_text(
            json.dumps(bundle.to_doc(), indent=2, sort_keys=True), encoding="utf-8"
        )
        print(f"featforge: wrote metrics report to {args.output}")
    return 0


def _run_summary(run_dir: str) -> dict:
    rd = RunDir(run_dir)
    manifest = rd.read_manifest()
    trials, truncated = rd.read_trials()
    if truncated:
        print(
            f"featforge: warning: {rd.path / 'trials.jsonl'} ends in a truncated record",
            file=sys.stderr,
        )
    best = best_trial(trials)
    if best is None:
        raise CliError(f"run directory {run_dir} has no successful trial")
    return {
        "run_dir": str(run_dir),
        "mode": manifest["config"].get("proposer_mode", "?"),
        "combined_score": best.combined_score,
        "f1_score": best.f1_score,
        "interpretability_score": best.interpretability_score,
        "trials": len(trials),
        "ok_trials": sum(1 for t in trials if t.status == "ok"),
    }


def cmd_compare(args) -> int:
    runs = [_run_summary(args.run_a), _run_summary(args.run_b)]
    out = Path(args.output)
    write_comparison(out, runs)
    for run in runs:
        print(
            f"{run['mode']:<12} combined={run['combined_score']:.4f} "
            f"f1={run['f1_score']:.4f} interp={run['interpretability_score']:.4f} "
            f"({run['run_dir']})"
        )
    print(f"featforge: wrote comparison to {out / 'comparison.md'}")
    return 0


def cmd_cost(args) -> int:
    config = load_config(args.config)
    splits = ingest(
        config.dataset_path,
        config.dataset_format,
        config.train_per_class,
        config.annotation_size,
        config.seed,
    )
    feature_set = None
    if args.run_dir:
        best_path = Path(args.run_dir) / "best_features.json"
        if best_path.exists():
            feature_set = _load_feature_set(str(best_path))
    breakdown = _cost_breakdown(config, splits, feature_set)
    print("predicted cost (LM-primitive units):")
    print(f"  propose: {breakdown.propose_term:.0f}")
    print(f"  extract: {breakdown.extract_term:.0f}")
    print(f"  score:   {breakdown.score_term:.0f}")
    print(f"  per evaluation: {breakdown.eval_total:.0f}  dominant: {breakdown.dominant}")
    print(f"  run total ({config.n_example_sets} + {config.resolved_n_iter()} evaluations): {breakdown.run_total:.0f}")
    if args.run_dir:
        usage_path = Path(args.run_dir) / "usage.json"
        if usage_path.exists():
            usage = _usage_by_role_from_doc(json.loads(usage_path.read_text("utf-8")))
            rec = reconcile(usage, breakdown)
            if rec.has_data:
                agree = "agrees" if rec.agreement else "DISAGREES"
                print(
                    f"measured: extractor token share {rec.extractor_token_share:.3f}; "
                    f"dominant role {rec.measured_dominant} {agree} with prediction"
                )
            else:
                print("measured: no data")
        else:
            print(f"measured: no usage ledger in {args.run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featforge",
        description=(
            "Discovers interpretable, discriminative feature schemas from "
            "labelled text by optimizing a feature-proposing LM prompt."
        ),
    )
    parser.add_argument("--version", action="version", version=f"featforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="run the full prompt search")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--run-dir", required=True, help="output/resume directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--mode", choices=["reflective", "scalar"], help="proposer feedback mode")
    p.add_argument("--scripted-lm", help="transcript file for the offline scripted backend")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("extract", help="apply a learned schema to new texts")
    p.add_argument("--features", required=True, help="best_features.json from a run")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")
    p.add_argument("--output", required=True, help="output JSONL path")
    p.add_argument("--config", help="config file naming the endpoint")
    p.add_argument("--scripted-lm", help="transcript file for the offline scripted backend")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="re-score a realized feature matrix (no LM calls)")
    p.add_argument("--features", required=True, help="feature JSONL from extract")
    p.add_argument("--schema", help="best_features.json (inferred from values if omitted)")
    p.add_argument("--k-folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="write the metrics bundle JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="compare two finished runs (e.g. reflective vs scalar)")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--output", default="comparison", help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("cost", help="predict run cost and reconcile against a ledger")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", help="finished run directory with usage.json")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestError, RunDirError, SchemaValidationError, CliError) as err:
        _err(str(err))
        return 2
    except TooFewPerClass as err:
        _err(str(err))
        return 4


if __name__ == "__main__":
    sys.exit(main())
