"""Feature encoding: every output is a float64 vector with values in [0, 1].

Strings go through two-probe hash buckets, categoricals through one-hot,
numbers through min/max normalization or bucketing. An event vector is the
concatenation ``[hash buckets | event-type one-hot | dwell-time buckets]``;
session metadata is encoded separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .examples import METADATA_KEYS, Instance

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_SALT = "some_fixed_string"
EVENT_TYPE_VOCAB = ("page", "click", "scroll", "log", "positive", "prediction_point")


class EncodingError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def fnv1a_64(s: str) -> int:
    h = FNV64_OFFSET
    for byte in s.encode("utf-8"):
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 18)
def _probe_indices(s: str, n: int, salt: str) -> tuple[int, int]:
    return fnv1a_64(s) % n, fnv1a_64(s + salt) % n


def hash_buckets(strings: Iterable[str], n: int = 100, salt: str = DEFAULT_SALT) -> np.ndarray:
    """Bit vector of length ``n`` with two bits set per string (Bloom-style)."""
    if n < 2:
        raise ConfigurationError("hash dimension must be at least 2")
    v = np.zeros(n)
    for s in strings:
        i, j = _probe_indices(s, n, salt)
        v[i] = 1.0
        v[j] = 1.0
    return v


def one_hot(value, vocab: Sequence, oov: bool = False) -> np.ndarray:
    if len(vocab) == 0:
        raise EncodingError("empty vocabulary")
    v = np.zeros(len(vocab) + (1 if oov else 0))
    try:
        v[list(vocab).index(value)] = 1.0
    except ValueError:
        if not oov:
            raise EncodingError(f"{value!r} not in vocabulary") from None
        v[-1] = 1.0
    return v


def normalize(x: float, x_min: float, x_max: float) -> float:
    if not x_max > x_min:
        raise ConfigurationError(f"normalization range [{x_min}, {x_max}] is empty")
    return min(1.0, max(0.0, (x - x_min) / (x_max - x_min)))


def linear_edges(start: float, end: float, n_buckets: int) -> np.ndarray:
    if n_buckets < 2 or not end > start:
        raise ConfigurationError("need n_buckets >= 2 and end > start")
    step = (end - start) / (n_buckets - 1)
    edges = start + step * np.arange(n_buckets)
    edges[-1] = end
    return edges


def bucket_index(value: float, edges: np.ndarray) -> int:
    """Index of the one-hot bit: number of edges <= value, minus one, clamped."""
    idx = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(idx, 0), len(edges) - 1)


def bucket_vector(value: float, edges: np.ndarray) -> np.ndarray:
    v = np.zeros(len(edges))
    v[bucket_index(value, edges)] = 1.0
    return v


def linear_bucket_vector(value: float, start: float, end: float, n_buckets: int) -> np.ndarray:
    """One-hot bucket vector over ``n_buckets`` evenly spaced edges ``start..end``.

    42 on [0, 100] with 11 buckets sets index 4; values outside the range
    clamp to the first/last bucket.
    """
    return bucket_vector(value, linear_edges(start, end, n_buckets))


@dataclass(frozen=True)
class BucketSpec:
    edges: tuple[float, ...]

    def __post_init__(self):
        e = self.edges
        if len(e) < 2 or any(not b > a for a, b in zip(e, e[1:])):
            raise ConfigurationError("bucket edges must be strictly increasing (at least 2)")

    @property
    def n_buckets(self) -> int:
        # bucket i is [edges[i], edges[i+1]); the last one is [edges[-1], inf)
        return len(self.edges)

    def vector(self, value: float) -> np.ndarray:
        return bucket_vector(value, np.asarray(self.edges))


def build_combined_buckets(s_l: float, c_l: float, c_n: float, n_edges: int) -> BucketSpec:
    """Linear edges ``0, s_l, ..., c_l`` followed by geometric edges up to ``c_n``.

    With ``k = c_l / s_l`` linear steps, the geometric part is
    ``c_l * p**i`` for ``i = 1..n_edges-k`` and ``p = (c_n/c_l)**(1/(n_edges-k))``,
    so it starts where the linear part stops and ends exactly at ``c_n``.
    """
    if not s_l > 0 or not c_l > 0:
        raise ConfigurationError("s_l and c_l must be positive")
    k_float = c_l / s_l
    k = round(k_float)
    if k < 1 or not math.isclose(k_float, k, rel_tol=1e-9):
        raise ConfigurationError("s_l must divide c_l evenly")
    if not c_n > c_l:
        raise ConfigurationError("c_n must exceed c_l")
    n_geo = n_edges - k
    if n_geo < 1:
        raise ConfigurationError(f"N={n_edges} leaves no room for geometric edges after {k} linear steps")
    p = (c_n / c_l) ** (1.0 / n_geo)
    linear = [s_l * i for i in range(k + 1)]
    geometric = [c_l * p**i for i in range(1, n_geo)] + [float(c_n)]
    return BucketSpec(tuple(float(x) for x in linear + geometric))


DEFAULT_DWELL_BUCKETS = dict(s_l=5.0, c_l=60.0, c_n=7200.0, n_edges=30)


def _default_metadata_ranges(max_len: int = 40) -> dict[str, tuple[float, float]]:
    return {
        "session_event_count": (0.0, float(max_len)),
        "distinct_page_count": (0.0, float(max_len)),
        "total_dwell_seconds": (0.0, 7200.0),
        "hour_of_day": (0.0, 1.0),
        "is_returning_user": (0.0, 1.0),
    }


@dataclass(frozen=True)
class EncoderConfig:
    hash_dim: int = 100
    salt: str = DEFAULT_SALT
    event_types: tuple[str, ...] = EVENT_TYPE_VOCAB
    dwell_buckets: BucketSpec = field(
        default_factory=lambda: build_combined_buckets(**DEFAULT_DWELL_BUCKETS)
    )
    metadata_ranges: tuple[tuple[str, float, float], ...] = tuple(
        (k, lo, hi) for k, (lo, hi) in _default_metadata_ranges().items()
    )

    def __post_init__(self):
        if self.hash_dim < 2:
            raise ConfigurationError("hash_dim must be >= 2")
        for key, lo, hi in self.metadata_ranges:
            if not hi > lo:
                raise ConfigurationError(f"empty range for metadata feature {key}")

    @property
    def event_vector_dim(self) -> int:
        return self.hash_dim + len(self.event_types) + self.dwell_buckets.n_buckets

    @property
    def metadata_vector_dim(self) -> int:
        return len(self.metadata_ranges)

    @classmethod
    def for_max_len(cls, max_len: int, **kw) -> "EncoderConfig":
        ranges = tuple((k, lo, hi) for k, (lo, hi) in _default_metadata_ranges(max_len).items())
        return cls(metadata_ranges=ranges, **kw)

    def to_dict(self) -> dict:
        return {
            "hash_dim": self.hash_dim,
            "salt": self.salt,
            "event_types": list(self.event_types),
            "dwell_edges": list(self.dwell_buckets.edges),
            "metadata_ranges": [list(r) for r in self.metadata_ranges],
            "event_vector_dim": self.event_vector_dim,
            "metadata_vector_dim": self.metadata_vector_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        cfg = cls(
            hash_dim=int(d["hash_dim"]),
            salt=d["salt"],
            event_types=tuple(d["event_types"]),
            dwell_buckets=BucketSpec(tuple(float(x) for x in d["dwell_edges"])),
            metadata_ranges=tuple((k, float(lo), float(hi)) for k, lo, hi in d["metadata_ranges"]),
        )
        for key in ("event_vector_dim", "metadata_vector_dim"):
            if key in d and d[key] != getattr(cfg, key):
                raise EncodingError(f"{key} {d[key]} does not match the layout ({getattr(cfg, key)})")
        return cfg


def event_tokens(event) -> tuple[str, ...]:
    toks = [f"type:{event.event_type}"]
    up = event.url_parts
    if up is not None:
        toks.append(f"host:{up.host}")
        toks.append(f"path:{up.path}")
        toks.extend(f"query:{k}" for k in up.query_keys)
    ua = event.user_agent_summary
    if ua is not None:
        toks.append(f"browser:{ua.browser_family}")
        toks.append(f"os:{ua.os_family}")
    return tuple(sorted(set(toks)))


@lru_cache(maxsize=1 << 16)
def _static_event_block(tokens: tuple[str, ...], event_type: str, hash_dim: int, salt: str,
                        event_types: tuple[str, ...]) -> np.ndarray:
    v = np.concatenate([hash_buckets(tokens, hash_dim, salt), one_hot(event_type, event_types)])
    v.setflags(write=False)
    return v


def encode_event(event, dwell_seconds: float, config: EncoderConfig) -> np.ndarray:
    if event.is_blank:
        return np.zeros(config.event_vector_dim)
    static = _static_event_block(event_tokens(event), event.event_type, config.hash_dim,
                                 config.salt, config.event_types)
    return np.concatenate([static, config.dwell_buckets.vector(dwell_seconds)])


def encode_metadata(metadata: dict, config: EncoderConfig) -> np.ndarray:
    out = np.zeros(config.metadata_vector_dim)
    for i, (key, lo, hi) in enumerate(config.metadata_ranges):
        if key not in metadata:
            raise EncodingError(f"metadata feature {key!r} missing")
        out[i] = normalize(float(metadata[key]), lo, hi)
    return out


def encode_instance(instance: Instance, config: EncoderConfig,
                    seq_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Encode to ``(sequence[seq_len, event_dim], metadata[meta_dim])``."""
    if seq_len is not None and len(instance.events) != seq_len:
        raise EncodingError(f"instance has {len(instance.events)} events, model expects {seq_len}")
    rows = []
    prev_ts = None
    for ev in instance.events:
        if ev.is_blank:
            rows.append(np.zeros(config.event_vector_dim))
            continue
        dwell = 0.0 if prev_ts is None else (ev.timestamp - prev_ts) / 1000.0
        prev_ts = ev.timestamp
        rows.append(encode_event(ev, dwell, config))
    seq = np.vstack(rows) if rows else np.zeros((0, config.event_vector_dim))
    if instance.real_events:
        meta = encode_metadata(instance.metadata, config)
    else:
        meta = np.zeros(config.metadata_vector_dim)
    return seq, meta


def encode_many(instances: Sequence[Instance], config: EncoderConfig,
                seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.zeros((len(instances), seq_len, config.event_vector_dim))
    M = np.zeros((len(instances), config.metadata_vector_dim))
    for i, inst in enumerate(instances):
        X[i], M[i] = encode_instance(inst, config, seq_len)
    return X, M


__all__ = [
    "BucketSpec", "EncoderConfig", "EncodingError", "ConfigurationError", "build_combined_buckets",
    "encode_instance", "encode_many", "hash_buckets", "linear_bucket_vector", "normalize", "one_hot",
    "fnv1a_64",
]
