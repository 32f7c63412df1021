"""Periodic re-training: retrain, validate, archive, verify, deploy.

Archive layout (stable)::

    <root>/<family>/ACTIVE                   active version id, one line
    <root>/<family>/<version>/model.bin      frozen model bytes
    <root>/<family>/<version>/stats.json     training stats
    <root>/<family>/<version>/verification.jsonl
                                             saved examples with training-time values

Versions are ``v0001``, ``v0002``, ... and are never deleted.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .calibration import calibration_curve, ece
from .config import Config
from .evaluation import auc
from .model import ModelError, NumericError, SearchError, TrainingError
from .pipeline import (InsufficientDataError, VerificationExample, make_examples, split_test, train_model,
                       verification_set)
from .serving import (InMemoryEventStore, LoadError, ModelRegistry, NotFoundError, PredictionLog,
                      PredictionLogRecord, PredictionService, deserialize_model, serialize_model)
from .sessions import Event, preprocess_event, read_archive

log = logging.getLogger(__name__)

DAY_MS = 86_400_000


@dataclass(frozen=True)
class RetrainPolicy:
    window_days: int = 30
    min_examples: int = 500
    auc_tolerance: float = 0.01
    verification_sample_size: int = 1000
    schedule_days: int = 7

    def __post_init__(self):
        if not 7 <= self.window_days <= 60:
            raise ValueError("window_days must be within [7, 60]")
        if self.auc_tolerance < 0:
            raise ValueError("auc_tolerance must be >= 0")

    @classmethod
    def from_config(cls, cfg: Config) -> "RetrainPolicy":
        lc = cfg.lifecycle
        return cls(lc.window_days, lc.min_examples, lc.auc_tolerance, lc.verification_sample_size,
                   lc.schedule_days)


class ModelArchive:
    def __init__(self, root):
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)

    def _family(self, family_id: str) -> str:
        if not family_id or "/" in family_id or family_id.startswith("."):
            raise ValueError(f"bad family id {family_id!r}")
        return os.path.join(self.root, family_id)

    def families(self) -> list[str]:
        return sorted(d for d in os.listdir(self.root) if os.path.isdir(os.path.join(self.root, d)))

    def versions(self, family_id: str) -> list[str]:
        d = self._family(family_id)
        if not os.path.isdir(d):
            return []
        return sorted(v for v in os.listdir(d) if v.startswith("v") and os.path.isdir(os.path.join(d, v)))

    def next_version_id(self, family_id: str) -> str:
        vs = self.versions(family_id)
        n = int(vs[-1][1:]) + 1 if vs else 1
        return f"v{n:04d}"

    def save_version(self, family_id: str, version_id: str, model_bytes: bytes, stats: dict,
                     verification: Sequence[VerificationExample]) -> str:
        fam = self._family(family_id)
        os.makedirs(fam, exist_ok=True)
        final = os.path.join(fam, version_id)
        if os.path.exists(final):
            raise FileExistsError(f"{family_id}/{version_id} already archived")
        tmp = tempfile.mkdtemp(prefix=".incoming-", dir=fam)
        try:
            with open(os.path.join(tmp, "model.bin"), "wb") as fh:
                fh.write(model_bytes)
            with open(os.path.join(tmp, "stats.json"), "w", encoding="utf-8") as fh:
                json.dump(stats, fh, indent=2, sort_keys=True, default=float)
                fh.write("\n")
            with open(os.path.join(tmp, "verification.jsonl"), "w", encoding="utf-8") as fh:
                for v in verification:
                    fh.write(json.dumps(v.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
            os.replace(tmp, final)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return version_id

    def _version_dir(self, family_id: str, version_id: str) -> str:
        d = os.path.join(self._family(family_id), version_id)
        if not os.path.isdir(d):
            raise NotFoundError(f"{family_id}/{version_id}")
        return d

    def model_bytes(self, family_id: str, version_id: str) -> bytes:
        with open(os.path.join(self._version_dir(family_id, version_id), "model.bin"), "rb") as fh:
            return fh.read()

    def stats(self, family_id: str, version_id: str) -> dict:
        with open(os.path.join(self._version_dir(family_id, version_id), "stats.json"), encoding="utf-8") as fh:
            return json.load(fh)

    def verification(self, family_id: str, version_id: str) -> list[VerificationExample]:
        out = []
        path = os.path.join(self._version_dir(family_id, version_id), "verification.jsonl")
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                d = json.loads(line)
                out.append(VerificationExample(d["anonymousId"], d["cutTimestamp"], d["label"],
                                               [preprocess_event(r) for r in d["events"]],
                                               float.fromhex(d["valueHex"])))
        return out

    def active(self, family_id: str) -> str | None:
        path = os.path.join(self._family(family_id), "ACTIVE")
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return fh.read().strip() or None

    def set_active(self, family_id: str, version_id: str) -> None:
        self._version_dir(family_id, version_id)
        fam = self._family(family_id)
        fd, tmp = tempfile.mkstemp(prefix=".active-", dir=fam)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(version_id + "\n")
        os.replace(tmp, os.path.join(fam, "ACTIVE"))


@dataclass
class VerificationResult:
    passed: bool
    checked: int
    first_mismatch: dict | None = None


def verify(model_bytes: bytes, examples: Sequence[VerificationExample],
           loader: Callable[[bytes], object] = deserialize_model,
           ttl_seconds: float = 3 * 86_400, max_events_per_user: int = 200) -> VerificationResult:
    """Replay saved examples through the serving path; values must match bit for bit.

    Each example's events go through ``PredictionService.ingest`` into a fresh
    store whose clock is pinned at the example's cut time, then through
    ``handle_predict``. ``loader`` is where a deployment would deserialize the
    model; tests swap it to simulate a skewed serving stack.
    """
    registry = ModelRegistry()
    try:
        model = registry.load_model(model_bytes, loader=loader)
    except (LoadError, ValueError, KeyError) as exc:
        return VerificationResult(False, 0, {"reason": f"load failed: {exc}"})
    for i, ex in enumerate(examples):
        store = InMemoryEventStore(ttl_seconds, max_events_per_user, clock=lambda ts=ex.cut_timestamp: ts)
        service = PredictionService(store, registry, PredictionLog())
        service.ingest([e.to_record() for e in ex.events])
        try:
            served = service.handle_predict(model.family_id, ex.anonymous_id)["value"]
        except (NumericError, ModelError, ValueError) as exc:
            return VerificationResult(False, i, {"index": i, "anonymous_id": ex.anonymous_id,
                                                 "reason": str(exc)})
        if float(served).hex() != float(ex.value).hex():
            return VerificationResult(False, i, {"index": i, "anonymous_id": ex.anonymous_id,
                                                 "expected": ex.value, "served": served})
    return VerificationResult(True, len(examples))


@dataclass
class RetrainOutcome:
    status: str  # deployed | rejected | failed
    reason: str = ""
    version_id: str | None = None
    details: dict = field(default_factory=dict)

    def __str__(self) -> str:
        return self.status if not self.reason else f"{self.status}({self.reason})"


_family_locks: dict[str, threading.Lock] = {}
_family_locks_guard = threading.Lock()


def _lock_for(family_id: str) -> threading.Lock:
    with _family_locks_guard:
        return _family_locks.setdefault(family_id, threading.Lock())


def window_events(events: Iterable[Event], window_days: int, now_ms: int | None = None) -> list[Event]:
    events = list(events)
    if not events:
        return []
    if now_ms is None:
        now_ms = max(e.timestamp for e in events)
    start = now_ms - window_days * DAY_MS
    return [e for e in events if start <= e.timestamp <= now_ms]


def retrain_cycle(family_id: str, policy: RetrainPolicy, cfg: Config, events, archive: ModelArchive,
                  registry: ModelRegistry | None = None, now_ms: int | None = None,
                  examples_hook: Callable[[list], list] | None = None,
                  loader: Callable[[bytes], object] = deserialize_model) -> RetrainOutcome:
    """Run one re-training cycle; the previous active version stays on any failure.

    ``events`` is an archive path or an iterable of events. ``examples_hook``
    may rewrite the generated examples before training (fault injection).
    """
    lock = _lock_for(family_id)
    if not lock.acquire(blocking=False):
        return RetrainOutcome("failed", "busy")
    try:
        return _retrain(family_id, policy, cfg, events, archive, registry, now_ms, examples_hook, loader)
    finally:
        lock.release()


def _retrain(family_id, policy, cfg, events, archive, registry, now_ms, examples_hook, loader):
    if isinstance(events, (str, os.PathLike)):
        events = read_archive(events)
    events = window_events(events, policy.window_days, now_ms)
    examples, _ = split_test(make_examples(events, cfg), cfg.evaluation.test_fraction)
    if examples_hook is not None:
        examples = examples_hook(examples)
    if len(examples) < policy.min_examples:
        return RetrainOutcome("failed", "insufficient_data", details={"examples": len(examples)})

    # (1) retrain
    try:
        model, _ = train_model(examples, cfg, family_id, policy.min_examples)
    except InsufficientDataError as exc:
        return RetrainOutcome("failed", "insufficient_data", details={"error": str(exc)})
    except (TrainingError, SearchError) as exc:
        return RetrainOutcome("failed", "training", details={"error": str(exc)})
    new_auc = float(model.training_stats["val_auc"])

    # (2) validate against the active version (skipped for the first model)
    previous = archive.active(family_id)
    details = {"val_auc": new_auc, "previous_version": previous}
    if previous is not None:
        prev_auc = archive.stats(family_id, previous).get("val_auc")
        details["previous_val_auc"] = prev_auc
        if prev_auc is not None and not new_auc >= prev_auc - policy.auc_tolerance:
            return RetrainOutcome("rejected", "validation", details=details)

    return deploy_candidate(family_id, model, examples, archive, policy, cfg, registry, loader, details)


def deploy_candidate(family_id: str, model, examples, archive: ModelArchive, policy: RetrainPolicy, cfg: Config,
                     registry: ModelRegistry | None = None,
                     loader: Callable[[bytes], object] = deserialize_model,
                     details: dict | None = None) -> RetrainOutcome:
    """Archive a trained model, verify it through the serving path, then activate it."""
    details = dict(details or {})
    # (3) archive with stats and a verification sample
    version_id = archive.next_version_id(family_id)
    model = replace(model, version_id=version_id, family_id=family_id)
    blob = serialize_model(model)
    vset = verification_set(model, examples, policy.verification_sample_size, cfg.model.seed)
    stats = {k: v for k, v in model.training_stats.items() if k != "val_indices"}
    stats.update(version_id=version_id, family_id=family_id, n_examples=len(examples),
                 n_positive=int(sum(e.label for e in examples)))
    archive.save_version(family_id, version_id, blob, stats, vset)

    # (4) verify through the serving path
    result = verify(blob, vset, loader=loader, ttl_seconds=cfg.serving.ttl_seconds,
                    max_events_per_user=cfg.serving.max_events_per_user)
    details["verified"] = result.checked
    if not result.passed:
        details["first_mismatch"] = result.first_mismatch
        return RetrainOutcome("rejected", "verification", version_id, details)

    # (5) deploy
    archive.set_active(family_id, version_id)
    if registry is not None:
        registry.load_model(blob)
    return RetrainOutcome("deployed", "", version_id, details)


def rollback(family_id: str, version_id: str, archive: ModelArchive,
             registry: ModelRegistry | None = None) -> RetrainOutcome:
    if version_id not in archive.versions(family_id):
        raise NotFoundError(f"{family_id}/{version_id}")
    archive.set_active(family_id, version_id)
    if registry is not None:
        if version_id in registry.versions(family_id):
            registry.activate_version(family_id, version_id)
        else:
            registry.load_model(archive.model_bytes(family_id, version_id))
    return RetrainOutcome("deployed", "rollback", version_id)


def load_active(archive: ModelArchive, registry: ModelRegistry) -> list[str]:
    """Load every family's active version into ``registry``."""
    loaded = []
    for fam in archive.families():
        v = archive.active(fam)
        if v is not None:
            registry.load_model(archive.model_bytes(fam, v))
            loaded.append(f"{fam}/{v}")
    return loaded


class PostServingError(ValueError):
    pass


@dataclass
class PostServingReport:
    n: int
    positives: int
    auc: float | None
    ece: float | None
    calibration_curve: object
    unknown_version_rows: int
    rows: list[dict]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "positives": self.positives,
            "auc": self.auc,
            "ece": self.ece,
            "calibration_curve": self.calibration_curve.to_dict(),
            "unknown_version_rows": self.unknown_version_rows,
        }


def post_serving_analysis(records: Sequence[PredictionLogRecord], events: Iterable[Event],
                          horizon_seconds: float, positive_type: str = "positive",
                          known_versions: dict[str, Iterable[str]] | None = None,
                          min_positives: int = 100) -> PostServingReport:
    """Join each logged prediction with whether the user converted within the horizon."""
    positives: dict[str, list[int]] = {}
    for ev in events:
        if ev.event_type == positive_type:
            positives.setdefault(ev.anonymous_id, []).append(ev.timestamp)
    known = {f: set(v) for f, v in (known_versions or {}).items()}
    rows = []
    horizon_ms = horizon_seconds * 1000
    for rec in records:
        ts = rec.wall_timestamp
        actual = any(ts < p <= ts + horizon_ms for p in positives.get(rec.anonymous_id, ()))
        unknown = known_versions is not None and rec.version_id not in known.get(rec.family_id, set())
        rows.append({"anonymous_id": rec.anonymous_id, "version_id": rec.version_id, "value": rec.value,
                     "actual": int(actual), "unknown_version": unknown})
    if not rows:
        raise PostServingError("no logged predictions to join")
    p = np.array([r["value"] for r in rows])
    y = np.array([r["actual"] for r in rows])
    return PostServingReport(
        n=len(rows),
        positives=int(y.sum()),
        auc=auc(p, y),
        ece=ece(p, y),
        calibration_curve=calibration_curve(p, y, min_positives),
        unknown_version_rows=sum(r["unknown_version"] for r in rows),
        rows=rows,
    )
