"""Run-directory persistence: manifest, append-only trial log, instruction
pool, lock file, and the canonical artifacts of a finished run."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .optimizer import Instruction, TrialRecord

MANIFEST = "manifest.json"
TRIALS = "trials.jsonl"
INSTRUCTIONS = "instructions.jsonl"
BEST_FEATURES = "best_features.json"
USAGE = "usage.json"
REPORT = "report.md"
METRICS_CSV = "metrics.csv"
LOCK = "run.lock"
FIGURES = "figures"

# Fields excluded when comparing trial logs across runs.
VOLATILE_TRIAL_FIELDS = ("wall_time_s", "started_at")


class RunDirError(RuntimeError):
    pass


class RunDirLocked(RunDirError):
    pass


class TruncatedTrialLog(RunDirError):
    pass


class RunDir:
    """One optimization run's on-disk home. A single process owns it at a
    time (lock file); anyone may read concurrently."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    # -- lock ------------------------------------------------------------

    def acquire_lock(self) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / LOCK
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirLocked(
                f"{lock} exists; another process owns this run directory "
                f"(remove the file if that process is gone)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))

    def release_lock(self) -> None:
        (self.path / LOCK).unlink(missing_ok=True)

    def __enter__(self) -> "RunDir":
        self.acquire_lock()
        return self

    def __exit__(self, *exc) -> None:
        self.release_lock()

    # -- manifest ----------------------------------------------------------

    def write_manifest(self, doc: dict) -> None:
        (self.path / MANIFEST).write_text(
            json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8"
        )

    def read_manifest(self) -> dict:
        return json.loads((self.path / MANIFEST).read_text("utf-8"))

    def has_manifest(self) -> bool:
        return (self.path / MANIFEST).exists()

    # -- trial log -----------------------------------------------------------

    def append_trial(self, trial: TrialRecord) -> None:
        line = json.dumps(trial.to_doc(), ensure_ascii=False)
        with open(self.path / TRIALS, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def read_trials(self) -> tuple[list[TrialRecord], bool]:
        """All persisted trials plus a flag for a truncated final line
        (the footprint of a crash mid-append)."""
        path = self.path / TRIALS
        if not path.exists():
            return [], False
        trials: list[TrialRecord] = []
        truncated = False
        lines = path.read_text("utf-8").split("\n")
        for i, line in enumerate(lines):
            if not line:
                continue
            try:
                trials.append(TrialRecord.from_doc(json.loads(line)))
            except (ValueError, KeyError) as err:
                if all(not rest for rest in lines[i + 1 :]):
                    truncated = True  # crash mid-append left a partial tail
                    break
                raise RunDirError(
                    f"{path}: corrupt trial record on line {i + 1}: {err}"
                ) from err
        return trials, truncated

    # -- instruction pool ---------------------------------------------------

    def append_instruction(self, index: int, instruction: Instruction) -> None:
        doc = {"index": index, "text": instruction.text, "provenance": instruction.provenance}
        with open(self.path / INSTRUCTIONS, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")

    def read_instructions(self) -> list[Instruction]:
        path = self.path / INSTRUCTIONS
        if not path.exists():
            return []
        out: list[Instruction] = []
        for line in path.read_text("utf-8").splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            if doc["index"] != len(out):
                raise RunDirError(f"{path}: instruction indices out of order")
            out.append(Instruction(doc["text"], doc["provenance"]))
        return out

    # -- final artifacts -----------------------------------------------------

    def write_best(self, doc: dict) -> None:
        (self.path / BEST_FEATURES).write_text(
            json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8"
        )

    def write_usage(self, doc: dict) -> None:
        (self.path / USAGE).write_text(
            json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8"
        )

    def read_usage(self) -> dict:
        return json.loads((self.path / USAGE).read_text("utf-8"))

    def figures_dir(self) -> Path:
        d = self.path / FIGURES
        d.mkdir(parents=True, exist_ok=True)
        return d


def canonical_trial_lines(path: str | Path) -> list[str]:
    """Trial-log lines re-serialized with sorted keys and without the
    volatile timestamp fields; the unit of cross-run comparison."""
    out = []
    for line in Path(path).read_text("utf-8").splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        for field in VOLATILE_TRIAL_FIELDS:
            doc.pop(field, None)
        out.append(json.dumps(doc, sort_keys=True, ensure_ascii=False))
    return out


def trial_log_fingerprint(path: str | Path) -> str:
    digest = hashlib.sha256()
    for line in canonical_trial_lines(path):
        digest.update(line.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()
