"""Glue shared by the CLI and the re-training loop: events -> trained model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .calibration import apply_matrix_scaling, ece, fit_holdout_split, matrix_scaling_fit
from .config import Config
from .encoding import EncoderConfig, build_combined_buckets, encode_many, fnv1a_64
from .examples import GENERATORS, Example, build_examples, drop_types
from .model import ModelConfig, TrainedModel, TrainingError, forward, hyperparameter_search, softmax
from .serving import predict_instance
from .sessions import Event, SessionizeStats, sessionize

log = logging.getLogger(__name__)


class InsufficientDataError(TrainingError):
    pass


def encoder_config(cfg: Config) -> EncoderConfig:
    e = cfg.encoding
    buckets = build_combined_buckets(e.dwell_linear_step, e.dwell_linear_cutoff, e.dwell_nonlinear_cutoff,
                                     e.dwell_n_edges)
    return EncoderConfig.for_max_len(cfg.examples.max_len, hash_dim=e.hash_dim, salt=e.salt,
                                     dwell_buckets=buckets)


def base_model_config(cfg: Config, enc: EncoderConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        seq_len=cfg.examples.max_len, event_dim=enc.event_vector_dim, metadata_dim=enc.metadata_vector_dim,
        gru_units=m.gru_units, mlp_layer_sizes=tuple(m.mlp_layer_sizes), merge_units=m.merge_units,
        dropout_rate=m.dropout_rate, l2_lambda=m.l2_lambda, pos_weight=m.pos_weight, lr=m.lr,
        beta1=m.beta1, beta2=m.beta2, eps=m.eps, epochs=m.epochs, batch_size=m.batch_size, seed=m.seed,
    )


def instance_config(cfg: Config) -> dict:
    return {
        "generator": cfg.examples.generator,
        "positive_event_type": cfg.examples.positive_event_type,
        "filtered_event_types": list(cfg.examples.filtered_event_types),
    }


def make_examples(events: Sequence[Event], cfg: Config, stats: SessionizeStats | None = None) -> list[Example]:
    sessions = sessionize(events, cfg.sessions.max_session_len, stats=stats)
    try:
        gen = GENERATORS[cfg.examples.generator](cfg.examples.positive_event_type)
    except KeyError:
        raise ValueError(f"unknown example generator {cfg.examples.generator!r}") from None
    filters = [drop_types(cfg.examples.filtered_event_types)]
    return build_examples(sessions, gen, filters, cfg.examples.max_len)


def is_test_user(anonymous_id: str, fraction: float) -> bool:
    return fnv1a_64("test-fold:" + anonymous_id) % 10_000 < fraction * 10_000


def split_test(examples: Sequence[Example], fraction: float) -> tuple[list[Example], list[Example]]:
    train, test = [], []
    for ex in examples:
        (test if is_test_user(ex.anonymous_id, fraction) else train).append(ex)
    return train, test


def encode_examples(examples: Sequence[Example], enc: EncoderConfig, seq_len: int):
    """Encode to compact arrays: sequences as uint8 bits, metadata as float64."""
    X = np.zeros((len(examples), seq_len, enc.event_vector_dim), dtype=np.uint8)
    M = np.zeros((len(examples), enc.metadata_vector_dim))
    chunk = 1024
    for s in range(0, len(examples), chunk):
        Xf, Mf = encode_many([e.instance for e in examples[s:s + chunk]], enc, seq_len)
        Xb = Xf.astype(np.uint8)
        if not np.array_equal(Xb, Xf):
            raise ValueError("event features are expected to be bits")
        X[s:s + chunk] = Xb
        M[s:s + chunk] = Mf
    labels = np.array([e.label for e in examples], dtype=int)
    return X, M, labels


def batch_logits(model: TrainedModel, X, M, chunk: int = 1024) -> np.ndarray:
    out = np.empty((len(X), 2))
    for s in range(0, len(X), chunk):
        out[s:s + chunk] = forward(np.asarray(X[s:s + chunk], dtype=np.float64), M[s:s + chunk],
                                   model.params, model.config, mode="infer")[0]
    return out


def batch_probs(model: TrainedModel, X, M) -> np.ndarray:
    """Class probabilities for many examples, calibrated if the model is."""
    z = batch_logits(model, X, M)
    if model.calibration is not None:
        return apply_matrix_scaling(z, model.calibration)
    return softmax(z)


def calibrate(model: TrainedModel, X, M, labels, cfg: Config, val_idx=None) -> TrainedModel:
    """Fit matrix scaling on half of the validation split; record ECEs on the other half.

    ``X, M, labels`` are the training arrays; ``val_idx`` defaults to the
    validation rows recorded during training.
    """
    c = cfg.calibration
    if val_idx is None:
        val_idx = model.training_stats["val_indices"]
    val_idx = np.asarray(val_idx, dtype=int)
    z = batch_logits(model, X[val_idx], M[val_idx])
    y = labels[val_idx]
    _, hold = fit_holdout_split(y, c.fit_fraction, cfg.model.seed)
    ms = matrix_scaling_fit(z, y, c.fit_fraction, cfg.model.seed, lr=c.lr, decay=c.decay,
                            decay_every=c.decay_every, steps=c.steps)
    stats = dict(model.training_stats)
    stats["holdout_ece_uncalibrated"] = float(ece(softmax(z[hold]), y[hold], c.ece_bins))
    stats["holdout_ece_calibrated"] = float(ece(apply_matrix_scaling(z[hold], ms), y[hold], c.ece_bins))
    return replace(model, calibration=ms, training_stats=stats)


def train_model(examples: Sequence[Example], cfg: Config, family_id: str = "",
                min_examples: int = 1) -> tuple[TrainedModel, tuple]:
    """Search, train and (optionally) calibrate. Returns the model and its encoded data."""
    if len(examples) < max(min_examples, 1):
        raise InsufficientDataError(f"{len(examples)} examples, need {max(min_examples, 1)}")
    labels = np.array([e.label for e in examples])
    if len(np.unique(labels)) < 2:
        raise InsufficientDataError("examples contain a single class")
    enc = encoder_config(cfg)
    base = base_model_config(cfg, enc)
    X, M, labels = encode_examples(examples, enc, base.seq_len)
    model = hyperparameter_search(X, M, labels, base, cfg.model.grid, enc, cfg.model.val_fraction)
    model = replace(model, family_id=family_id, instance_config=instance_config(cfg))
    model.training_stats["val_anonymous_ids"] = [examples[i].anonymous_id
                                                 for i in model.training_stats["val_indices"]]
    if cfg.calibration.enabled:
        model = calibrate(model, X, M, labels, cfg)
    return model, (X, M, labels)


@dataclass
class VerificationExample:
    anonymous_id: str
    cut_timestamp: int
    label: int
    events: list
    value: float

    def to_dict(self) -> dict:
        return {
            "anonymousId": self.anonymous_id,
            "cutTimestamp": self.cut_timestamp,
            "label": self.label,
            "events": [e.to_record() for e in self.events],
            "value": self.value,
            "valueHex": float(self.value).hex(),
        }


def verification_set(model: TrainedModel, examples: Sequence[Example], n: int, seed: int) -> list[VerificationExample]:
    """Seeded sample of examples with their training-time prediction values."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(examples), size=min(n, len(examples)), replace=False))
    out = []
    for i in idx:
        ex = examples[int(i)]
        out.append(VerificationExample(ex.anonymous_id, ex.cut_timestamp, ex.label, list(ex.source_events),
                                       predict_instance(model, ex.instance)))
    return out
