"""Real-time serving: event store, frozen models, registry, predictions, HTTP.

Frozen model layout (all integers little-endian)::

    b"CPFM"                      magic
    uint16                       format version (1)
    uint32                       header length H
    H bytes                      UTF-8 JSON header (sorted keys)
    float64[...]                 parameters in declared order, then the
                                 calibration W (row-major) and b if present
    32 bytes                     SHA-256 of everything above
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import os
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterable, Mapping, Sequence
from urllib.parse import unquote

import numpy as np

from .calibration import MatrixScaling, apply_matrix_scaling
from .encoding import EncoderConfig, encode_instance
from .examples import Instance, drop_types, make_instance
from .model import ModelConfig, TrainedModel, forward, param_shapes, softmax
from .sessions import EVENT_TYPES, Event, MalformedEventError, preprocess_event, write_archive

log = logging.getLogger(__name__)

MAGIC = b"CPFM"
FORMAT_VERSION = 1
_CHECKSUM_LEN = 32

DEFAULT_TTL_SECONDS = 3 * 86_400
DEFAULT_MAX_EVENTS = 200


class NotFoundError(KeyError):
    pass


class LoadError(ValueError):
    pass


class ArchiveUnavailableError(IOError):
    """The archive sink refused a batch; the whole batch may be retried."""

    retryable = True


def wall_clock_ms() -> int:
    return int(time.time() * 1000)


class InMemoryEventStore:
    """Per-user bounded buffers of recent events with TTL expiry.

    ``clock`` returns the current time in epoch milliseconds and can be
    swapped for a fake in tests. Only ``allowed_types`` are stored.
    """

    def __init__(self, ttl_seconds: float = DEFAULT_TTL_SECONDS, max_events_per_user: int = DEFAULT_MAX_EVENTS,
                 allowed_types: Iterable[str] | None = None, clock: Callable[[], int] = wall_clock_ms):
        self.ttl_seconds = ttl_seconds
        self.max_events_per_user = max_events_per_user
        self.allowed_types = frozenset(allowed_types) if allowed_types is not None else None
        self.clock = clock
        self._events: dict[str, list[tuple[int, int, Event]]] = defaultdict(list)
        self._seq = 0
        self._lock = threading.Lock()

    def accepts(self, event: Event) -> bool:
        return self.allowed_types is None or event.event_type in self.allowed_types

    def append(self, event: Event) -> bool:
        if not self.accepts(event):
            return False
        with self._lock:
            buf = self._events[event.anonymous_id]
            self._seq += 1
            # keyed on (timestamp, arrival) so equal timestamps keep arrival order
            bisect.insort(buf, (event.timestamp, self._seq, event), key=lambda x: (x[0], x[1]))
            if len(buf) > self.max_events_per_user:
                del buf[: len(buf) - self.max_events_per_user]
        return True

    def recent(self, anonymous_id: str, limit: int | None = None,
               allowed_types: Iterable[str] | None = None) -> list[Event]:
        cutoff = self.clock() - self.ttl_seconds * 1000
        types = frozenset(allowed_types) if allowed_types is not None else None
        with self._lock:
            buf = self._events.get(anonymous_id)
            if not buf:
                return []
            # drop expired entries while we hold the lock
            first_live = bisect.bisect_left(buf, cutoff, key=lambda x: x[0])
            if first_live:
                del buf[:first_live]
            if not buf:
                del self._events[anonymous_id]
                return []
            events = [e for _, _, e in buf if types is None or e.event_type in types]
        if limit is not None:
            events = events[-limit:] if limit > 0 else []
        return events

    def users(self) -> list[str]:
        with self._lock:
            return list(self._events)


# --- frozen models -----------------------------------------------------------

def serialize_model(model: TrainedModel) -> bytes:
    shapes = param_shapes(model.config)
    header = {
        "family_id": model.family_id,
        "version_id": model.version_id,
        "model_config": model.config.to_dict(),
        "encoder_config": model.encoder_config.to_dict(),
        "instance_config": model.instance_config,
        "params": [[name, list(shape)] for name, shape in shapes],
        "calibrated": model.calibration is not None,
        "val_auc": model.training_stats.get("val_auc"),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(head)), head]
    for name, shape in shapes:
        arr = np.asarray(model.params[name], dtype="<f8")
        if arr.shape != tuple(shape):
            raise LoadError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        chunks.append(arr.tobytes(order="C"))
    if model.calibration is not None:
        chunks.append(np.asarray(model.calibration.W, dtype="<f8").tobytes(order="C"))
        chunks.append(np.asarray(model.calibration.b, dtype="<f8").tobytes(order="C"))
    body = b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def deserialize_model(blob: bytes) -> TrainedModel:
    if len(blob) < len(MAGIC) + 6 + _CHECKSUM_LEN or blob[:4] != MAGIC:
        raise LoadError("not a frozen model")
    body, digest = blob[:-_CHECKSUM_LEN], blob[-_CHECKSUM_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise LoadError("checksum mismatch")
    version, hlen = struct.unpack_from("<HI", body, 4)
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported format version {version}")
    offset = 10
    header = json.loads(body[offset:offset + hlen].decode("utf-8"))
    offset += hlen
    cfg = ModelConfig.from_dict(header["model_config"])
    enc = EncoderConfig.from_dict(header["encoder_config"])
    declared = [(n, tuple(s)) for n, s in header["params"]]
    if declared != param_shapes(cfg):
        raise LoadError("parameter manifest does not match the model config")
    params = {}
    for name, shape in declared:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    calibration = None
    if header["calibrated"]:
        W = np.frombuffer(body, dtype="<f8", count=4, offset=offset).reshape(2, 2).astype(np.float64)
        b = np.frombuffer(body, dtype="<f8", count=2, offset=offset + 32).astype(np.float64)
        offset += 48
        calibration = MatrixScaling(W, b)
    if offset != len(body):
        raise LoadError("trailing bytes in frozen model")
    stats = {"val_auc": header.get("val_auc")}
    return TrainedModel(params, cfg, enc, calibration, stats, header["version_id"], header["family_id"],
                        instance_config=header.get("instance_config") or {})


def model_filters(model: TrainedModel):
    return [drop_types(model.instance_config.get("filtered_event_types", ()))]


def kept_types(model: TrainedModel) -> list[str]:
    dropped = set(model.instance_config.get("filtered_event_types", ()))
    return [t for t in EVENT_TYPES if t != "blank" and t not in dropped]


def predict_instance(model: TrainedModel, instance: Instance) -> float:
    """Positive-class probability for one instance (calibrated if possible).

    This is the only inference routine used for served values and for the
    training-time values saved for verification.
    """
    seq, meta = encode_instance(instance, model.encoder_config, model.config.seq_len)
    logits = forward(seq[None], meta[None], model.params, model.config, mode="infer")[0][0]
    if model.calibration is not None:
        probs = apply_matrix_scaling(logits, model.calibration)
    else:
        probs = softmax(logits)
    return float(probs[1])


def predict_events(model: TrainedModel, events: Sequence[Event]) -> tuple[float, Instance]:
    inst = make_instance(events, model_filters(model), model.config.seq_len)
    return predict_instance(model, inst), inst


class ModelRegistry:
    """Loaded model versions per family with one active version each.

    Reads take a reference to the active model, so a swap never affects a
    prediction already in flight.
    """

    def __init__(self):
        self._versions: dict[str, dict[str, TrainedModel]] = defaultdict(dict)
        self._active: dict[str, TrainedModel] = {}
        self._lock = threading.Lock()

    def load_model(self, blob: bytes, activate: bool = True,
                   loader: Callable[[bytes], TrainedModel] = deserialize_model) -> TrainedModel:
        model = loader(blob)  # raises before touching registry state
        with self._lock:
            self._versions[model.family_id][model.version_id] = model
            if activate:
                self._active[model.family_id] = model
        return model

    def activate_version(self, family_id: str, version_id: str) -> TrainedModel:
        with self._lock:
            try:
                model = self._versions[family_id][version_id]
            except KeyError:
                raise NotFoundError(f"{family_id}/{version_id}") from None
            self._active[family_id] = model
        return model

    def active(self, family_id: str) -> TrainedModel:
        model = self._active.get(family_id)
        if model is None:
            raise NotFoundError(f"no active model for family {family_id!r}")
        return model

    def versions(self, family_id: str) -> list[str]:
        with self._lock:
            return sorted(self._versions.get(family_id, {}))

    def families(self) -> list[str]:
        return sorted(self._active)


@dataclass
class PredictionLogRecord:
    wall_timestamp: int
    anonymous_id: str
    family_id: str
    version_id: str
    event_ids: list[str]
    value: float
    calibrated: bool
    cold_start: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class PredictionLog:
    """Append-only JSONL prediction log, rotated by size.

    With ``path=None`` records are only kept in memory (``records``).
    """

    def __init__(self, path=None, max_bytes: int = 64 * 1024 * 1024, keep_in_memory: bool | None = None):
        self.path = path
        self.max_bytes = max_bytes
        self.keep_in_memory = path is None if keep_in_memory is None else keep_in_memory
        self.records: list[PredictionLogRecord] = []
        self._lock = threading.Lock()

    def append(self, record: PredictionLogRecord) -> None:
        line = json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
        with self._lock:
            if self.keep_in_memory:
                self.records.append(record)
            if self.path is None:
                return
            if os.path.exists(self.path) and os.path.getsize(self.path) + len(line) > self.max_bytes:
                self._rotate()
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)

    def _rotate(self) -> None:
        n = 1
        while os.path.exists(f"{self.path}.{n}"):
            n += 1
        os.replace(self.path, f"{self.path}.{n}")


def read_prediction_log(path) -> list[PredictionLogRecord]:
    """Read a log and its rotated predecessors (``path.1``, ``path.2``, ...)."""
    files = []
    n = 1
    while os.path.exists(f"{path}.{n}"):
        files.append(f"{path}.{n}")
        n += 1
    if os.path.exists(path):
        files.append(path)
    out = []
    for fname in files:
        with open(fname, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    out.append(PredictionLogRecord(**json.loads(line)))
    return out


class PredictionService:
    """Ingestion fan-out plus the prediction endpoint logic."""

    def __init__(self, store: InMemoryEventStore, registry: ModelRegistry | None = None,
                 prediction_log: PredictionLog | None = None,
                 archive_sink: Callable[[list[Event]], None] | None = None,
                 clock: Callable[[], int] | None = None):
        self.store = store
        self.registry = registry or ModelRegistry()
        self.log = prediction_log or PredictionLog()
        self.archive_sink = archive_sink
        self.clock = clock or store.clock

    def ingest(self, batch: Iterable[Mapping]) -> dict:
        """Preprocess, archive and store a batch; malformed records are counted."""
        events, rejected = [], 0
        for raw in batch:
            try:
                events.append(preprocess_event(raw))
            except (MalformedEventError, TypeError, AttributeError, ValueError):
                rejected += 1
        if self.archive_sink is not None and events:
            try:
                self.archive_sink(events)
            except OSError as exc:
                raise ArchiveUnavailableError(str(exc)) from exc
        stored = store_failures = 0
        for ev in events:
            try:
                stored += bool(self.store.append(ev))
            except Exception:  # counted, never fails the batch
                log.exception("store append failed")
                store_failures += 1
        return {"accepted": len(events), "rejected": rejected, "stored": stored,
                "store_failures": store_failures}

    def handle_predict(self, family_id: str, anonymous_id: str) -> dict:
        model = self.registry.active(family_id)
        events = self.store.recent(anonymous_id, limit=model.config.seq_len, allowed_types=kept_types(model))
        value, inst = predict_events(model, events)
        cold = not inst.real_events
        self.log.append(PredictionLogRecord(
            wall_timestamp=int(self.clock()),
            anonymous_id=anonymous_id,
            family_id=family_id,
            version_id=model.version_id,
            event_ids=[e.event_id for e in inst.real_events],
            value=value,
            calibrated=model.calibration is not None,
            cold_start=cold,
        ))
        return {"value": value, "version_id": model.version_id, "cold_start": cold}

    def model_info(self, family_id: str) -> dict:
        model = self.registry.active(family_id)
        return {
            "familyId": family_id,
            "versionId": model.version_id,
            "calibrated": model.calibration is not None,
            "valAuc": model.training_stats.get("val_auc"),
            "seqLen": model.config.seq_len,
            "versions": self.registry.versions(family_id),
        }


# --- HTTP --------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    service: PredictionService
    server_version = "clickpredict/1"

    def log_message(self, fmt, *args):
        log.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: dict) -> None:
        data = json.dumps(body, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self):
        n = int(self.headers.get("Content-Length") or 0)
        return json.loads(self.rfile.read(n).decode("utf-8")) if n else None

    def _parts(self) -> list[str]:
        return [unquote(p) for p in self.path.split("?", 1)[0].strip("/").split("/")]

    def do_GET(self):
        parts = self._parts()
        try:
            if len(parts) == 4 and parts[:2] == ["v1", "predict"]:
                res = self.service.handle_predict(parts[2], parts[3])
                self._send(200, {"value": res["value"], "versionId": res["version_id"],
                                 "coldStart": res["cold_start"]})
            elif len(parts) == 3 and parts[:2] == ["v1", "models"]:
                self._send(200, self.service.model_info(parts[2]))
            else:
                self._send(404, {"error": "not_found", "path": self.path})
        except NotFoundError as exc:
            self._send(404, {"error": "not_found", "detail": str(exc)})

    def do_POST(self):
        parts = self._parts()
        try:
            body = self._body()
        except (ValueError, UnicodeDecodeError):
            self._send(400, {"error": "bad_json"})
            return
        try:
            if parts == ["v1", "events"]:
                if not isinstance(body, list):
                    self._send(400, {"error": "expected a JSON array of events"})
                    return
                self._send(200, self.service.ingest(body))
            elif len(parts) == 4 and parts[:2] == ["v1", "models"] and parts[3] == "activate":
                if not isinstance(body, dict) or "versionId" not in body:
                    self._send(400, {"error": "expected {\"versionId\": ...}"})
                    return
                model = self.service.registry.activate_version(parts[2], str(body["versionId"]))
                self._send(200, {"familyId": model.family_id, "versionId": model.version_id})
            else:
                self._send(404, {"error": "not_found", "path": self.path})
        except NotFoundError as exc:
            self._send(404, {"error": "not_found", "detail": str(exc)})
        except ArchiveUnavailableError as exc:
            self._send(HTTPStatus.SERVICE_UNAVAILABLE, {"error": "archive_unavailable", "retryable": True,
                                                        "detail": str(exc)})


def make_server(service: PredictionService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def archive_file_sink(path) -> Callable[[list[Event]], None]:
    lock = threading.Lock()

    def sink(events: list[Event]) -> None:
        with lock:
            write_archive(path, events, append=True)

    return sink
