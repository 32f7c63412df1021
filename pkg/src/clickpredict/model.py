"""GRU sequence classifier with a metadata MLP, written directly in numpy.

Architecture::

    events  -> GRU -> h_T --+
                            +-> concat -> dropout -> dense(ReLU) -> dense -> softmax
    metadata -> MLP(ReLU) --+

Everything is float64 so the serving path can reproduce training-time
predictions bit for bit.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .calibration import ece
from .evaluation import auc

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


class ModelError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 40
    event_dim: int = 137
    metadata_dim: int = 5
    gru_units: int = 32
    mlp_layer_sizes: tuple[int, ...] = (16, 16)
    merge_units: int = 16
    n_classes: int = 2
    dropout_rate: float = 0.0
    l2_lambda: float = 0.0
    pos_weight: float = 1.0
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 8
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must be in [0, 1)")
        if self.pos_weight < 1.0:
            raise ModelError("pos_weight must be >= 1")
        if self.l2_lambda < 0:
            raise ModelError("l2_lambda must be >= 0")
        for name in ("seq_len", "event_dim", "metadata_dim", "gru_units", "merge_units",
                     "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.n_classes != 2:
            raise ModelError("only binary classifiers are supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_layer_sizes"] = list(self.mlp_layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["mlp_layer_sizes"] = tuple(d.get("mlp_layer_sizes", ()))
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in their declared (serialization) order."""
    D, H = cfg.event_dim, cfg.gru_units
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for g in "zrn":
        shapes.append((f"gru_W{g}", (D, H)))
    for g in "zrn":
        shapes.append((f"gru_U{g}", (H, H)))
    for g in "zrn":
        shapes.append((f"gru_b{g}", (H,)))
    fan_in = cfg.metadata_dim
    for i, size in enumerate(cfg.mlp_layer_sizes):
        shapes.append((f"mlp_W{i}", (fan_in, size)))
        shapes.append((f"mlp_b{i}", (size,)))
        fan_in = size
    merged = H + (cfg.mlp_layer_sizes[-1] if cfg.mlp_layer_sizes else cfg.metadata_dim)
    shapes.append(("merge_W", (merged, cfg.merge_units)))
    shapes.append(("merge_b", (cfg.merge_units,)))
    shapes.append(("out_W", (cfg.merge_units, cfg.n_classes)))
    shapes.append(("out_b", (cfg.n_classes,)))
    return shapes


def is_weight(name: str) -> bool:
    """Weight matrices get L2; biases do not."""
    return "_b" not in name


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg):
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def _sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    X: np.ndarray
    hs: list = field(default_factory=list)
    zs: list = field(default_factory=list)
    rs: list = field(default_factory=list)
    ns: list = field(default_factory=list)
    mlp_in: list = field(default_factory=list)
    mlp_pre: list = field(default_factory=list)
    mlp_masks: list = field(default_factory=list)
    merged_mask: np.ndarray | None = None
    merged: np.ndarray | None = None
    merge_pre: np.ndarray | None = None
    merge_act: np.ndarray | None = None


def _dropout_mask(shape, rate, rng):
    if rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def forward(X, M, params, cfg: ModelConfig, mode: str = "infer", rng=None, return_cache=False):
    """Batched forward pass.

    ``X`` is ``(batch, seq_len, event_dim)``, ``M`` is ``(batch, metadata_dim)``.
    Returns ``(logits, probs)`` and, if asked, the activation cache needed by
    :func:`backward`. Dropout is only active in ``mode="train"``.
    """
    X = np.asarray(X, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (cfg.seq_len, cfg.event_dim):
        raise ModelError(f"sequence shape {X.shape[1:]} != {(cfg.seq_len, cfg.event_dim)}")
    if M.ndim != 2 or M.shape[1] != cfg.metadata_dim or M.shape[0] != X.shape[0]:
        raise ModelError(f"metadata shape {M.shape} incompatible with model")
    if mode not in ("train", "infer"):
        raise ModelError(f"unknown mode {mode!r}")
    train = mode == "train" and cfg.dropout_rate > 0.0
    if train and rng is None:
        raise ModelError("train mode with dropout needs an rng")

    B, T, D = X.shape
    H = cfg.gru_units
    Wx = np.concatenate([params["gru_Wz"], params["gru_Wr"], params["gru_Wn"]], axis=1)
    bx = np.concatenate([params["gru_bz"], params["gru_br"], params["gru_bn"]])
    Uzr = np.concatenate([params["gru_Uz"], params["gru_Ur"]], axis=1)
    Un = params["gru_Un"]
    XW = (X.reshape(B * T, D) @ Wx).reshape(B, T, 3 * H) + bx

    cache = ForwardCache(X=X)
    h = np.zeros((B, H))
    cache.hs.append(h)
    for t in range(T):
        a = XW[:, t, :]
        hzr = h @ Uzr
        z = _sigmoid(a[:, :H] + hzr[:, :H])
        r = _sigmoid(a[:, H:2 * H] + hzr[:, H:])
        n = np.tanh(a[:, 2 * H:] + (r * h) @ Un)
        h = (1.0 - z) * n + z * h
        cache.zs.append(z)
        cache.rs.append(r)
        cache.ns.append(n)
        cache.hs.append(h)

    g = M
    for i in range(len(cfg.mlp_layer_sizes)):
        cache.mlp_in.append(g)
        pre = g @ params[f"mlp_W{i}"] + params[f"mlp_b{i}"]
        g = np.maximum(pre, 0.0)
        mask = _dropout_mask(g.shape, cfg.dropout_rate, rng) if train else None
        if mask is not None:
            g = g * mask
        cache.mlp_pre.append(pre)
        cache.mlp_masks.append(mask)

    merged = np.concatenate([h, g], axis=1)
    mask = _dropout_mask(merged.shape, cfg.dropout_rate, rng) if train else None
    if mask is not None:
        merged = merged * mask
    cache.merged_mask = mask
    cache.merged = merged
    merge_pre = merged @ params["merge_W"] + params["merge_b"]
    merge_act = np.maximum(merge_pre, 0.0)
    cache.merge_pre = merge_pre
    cache.merge_act = merge_act
    logits = merge_act @ params["out_W"] + params["out_b"]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    probs = softmax(logits)
    if return_cache:
        return logits, probs, cache
    return logits, probs


def example_weights(labels, pos_weight):
    labels = np.asarray(labels)
    return np.where(labels == 1, float(pos_weight), 1.0)


def weighted_cross_entropy(probs, label, pos_weight: float = 1.0) -> float:
    """``-pos_weight*ln p1`` for positives, ``-ln p0`` for negatives."""
    probs = np.asarray(probs, dtype=np.float64)
    p = max(float(probs[label]), PROB_EPS)
    w = pos_weight if label == 1 else 1.0
    return -w * float(np.log(p))


def l2_penalty(params, lam: float) -> float:
    if lam == 0.0:
        return 0.0
    return lam * sum(float(np.sum(v * v)) for k, v in params.items() if is_weight(k))


def batch_loss(X, M, labels, params, cfg: ModelConfig, mode="train", rng=None) -> float:
    _, probs = forward(X, M, params, cfg, mode=mode, rng=rng)
    labels = np.asarray(labels)
    p_true = np.maximum(probs[np.arange(len(labels)), labels], PROB_EPS)
    data = float(np.mean(-example_weights(labels, cfg.pos_weight) * np.log(p_true)))
    return data + l2_penalty(params, cfg.l2_lambda)


def backward(cache: ForwardCache, probs, labels, params, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Exact gradients of :func:`batch_loss` given a train-mode forward cache."""
    labels = np.asarray(labels)
    B = len(labels)
    H = cfg.gru_units
    w = example_weights(labels, cfg.pos_weight)
    Y = np.zeros_like(probs)
    Y[np.arange(B), labels] = 1.0
    live = probs[np.arange(B), labels] > PROB_EPS
    dlogits = (w * live)[:, None] * (probs - Y) / B

    grads: dict[str, np.ndarray] = {}
    grads["out_W"] = cache.merge_act.T @ dlogits
    grads["out_b"] = dlogits.sum(axis=0)
    d_pre = (dlogits @ params["out_W"].T) * (cache.merge_pre > 0)
    grads["merge_W"] = cache.merged.T @ d_pre
    grads["merge_b"] = d_pre.sum(axis=0)
    d_merged = d_pre @ params["merge_W"].T
    if cache.merged_mask is not None:
        d_merged = d_merged * cache.merged_mask

    dh = d_merged[:, :H]
    dg = d_merged[:, H:]
    for i in reversed(range(len(cfg.mlp_layer_sizes))):
        if cache.mlp_masks[i] is not None:
            dg = dg * cache.mlp_masks[i]
        dpre = dg * (cache.mlp_pre[i] > 0)
        grads[f"mlp_W{i}"] = cache.mlp_in[i].T @ dpre
        grads[f"mlp_b{i}"] = dpre.sum(axis=0)
        dg = dpre @ params[f"mlp_W{i}"].T

    T = len(cache.zs)
    dXW = np.empty((B, T, 3 * H))
    Uz, Ur, Un = params["gru_Uz"], params["gru_Ur"], params["gru_Un"]
    dUz = np.zeros_like(Uz)
    dUr = np.zeros_like(Ur)
    dUn = np.zeros_like(Un)
    for t in reversed(range(T)):
        h_prev = cache.hs[t]
        z, r, n = cache.zs[t], cache.rs[t], cache.ns[t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        da_n = dn * (1.0 - n * n)
        rh = r * h_prev
        dUn += rh.T @ da_n
        d_rh = da_n @ Un.T
        dr = d_rh * h_prev
        dh_prev += d_rh * r
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dUz += h_prev.T @ da_z
        dUr += h_prev.T @ da_r
        dh_prev += da_z @ Uz.T + da_r @ Ur.T
        dXW[:, t, :H] = da_z
        dXW[:, t, H:2 * H] = da_r
        dXW[:, t, 2 * H:] = da_n
        dh = dh_prev

    D = cfg.event_dim
    flat = dXW.reshape(B * T, 3 * H)
    dWx = cache.X.reshape(B * T, D).T @ flat
    dbx = flat.sum(axis=0)
    for j, gname in enumerate("zrn"):
        grads[f"gru_W{gname}"] = dWx[:, j * H:(j + 1) * H]
        grads[f"gru_b{gname}"] = dbx[j * H:(j + 1) * H]
    grads["gru_Uz"], grads["gru_Ur"], grads["gru_Un"] = dUz, dUr, dUn

    if cfg.l2_lambda:
        for k in grads:
            if is_weight(k):
                grads[k] = grads[k] + 2.0 * cfg.l2_lambda * params[k]
    return grads


def loss_and_grads(X, M, labels, params, cfg: ModelConfig, rng=None):
    _, probs, cache = forward(X, M, params, cfg, mode="train", rng=rng, return_cache=True)
    labels = np.asarray(labels)
    p_true = np.maximum(probs[np.arange(len(labels)), labels], PROB_EPS)
    loss = float(np.mean(-example_weights(labels, cfg.pos_weight) * np.log(p_true)))
    loss += l2_penalty(params, cfg.l2_lambda)
    return loss, backward(cache, probs, labels, params, cfg)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=None):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t
    return params, state


@dataclass
class TrainedModel:
    params: dict
    config: ModelConfig
    encoder_config: object
    calibration: object = None
    training_stats: dict = field(default_factory=dict)
    version_id: str = ""
    family_id: str = ""
    # which event types make_instance drops; the serving path needs the same list
    instance_config: dict = field(default_factory=dict)

    def logits(self, X, M) -> np.ndarray:
        return forward(X, M, self.params, self.config, mode="infer")[0]


def stratified_split(labels, val_fraction: float, seed: int):
    """Seeded per-class split. Returns sorted ``(train_idx, val_idx)``."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * val_fraction))
        if len(idx) > 1:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.asarray(train, dtype=int)), np.sort(np.asarray(val, dtype=int))


def _infer_logits(X, M, params, cfg, chunk=2048):
    out = np.empty((len(X), cfg.n_classes))
    for s in range(0, len(X), chunk):
        out[s:s + chunk] = forward(X[s:s + chunk], M[s:s + chunk], params, cfg, mode="infer")[0]
    return out


def train_arrays(X, M, labels, cfg: ModelConfig, encoder_config=None, val_fraction=0.2,
                 split=None) -> TrainedModel:
    """Train on already-encoded arrays.

    ``X`` may be a compact integer array (the event features are all bits);
    it is cast to float64 per batch. Returns the parameters of the epoch with
    the best validation AUC.
    """
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise TrainingError("no examples to train on")
    if split is None:
        train_idx, val_idx = stratified_split(labels, val_fraction, cfg.seed)
    else:
        train_idx, val_idx = split
    if len(np.unique(labels[train_idx])) < 2:
        raise TrainingError("training split needs both classes")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng)
    state = AdamState.zeros_like(params)
    has_val = len(val_idx) > 0 and len(np.unique(labels[val_idx])) == 2
    Xv = np.asarray(X[val_idx], dtype=np.float64) if len(val_idx) else None
    Mv = M[val_idx] if len(val_idx) else None

    loss_curve, val_aucs, batch_pos = [], [], []
    best_auc, best_params, best_epoch = -np.inf, copy.deepcopy(params), -1
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        total, seen, pos_seen = 0.0, 0, 0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            yb = labels[b]
            loss, grads = loss_and_grads(np.asarray(X[b], dtype=np.float64), M[b], yb, params, cfg, rng)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss * len(b)
            seen += len(b)
            pos_seen += int(yb.sum())
        loss_curve.append(total / seen)
        batch_pos.append(pos_seen)
        if has_val:
            score = auc(softmax(_infer_logits(Xv, Mv, params, cfg))[:, 1], labels[val_idx])
        else:
            score = -loss_curve[-1]
        val_aucs.append(score)
        log.debug("epoch %d loss %.5f val_auc %.4f", epoch, loss_curve[-1], score)
        if score > best_auc:
            best_auc, best_params, best_epoch = score, copy.deepcopy(params), epoch

    stats = {
        "loss_curve": loss_curve,
        "val_auc_curve": val_aucs,
        "best_epoch": best_epoch,
        "val_auc": float(best_auc) if has_val else float("nan"),
        "train_size": int(len(train_idx)),
        "val_size": int(len(val_idx)),
        "train_positives": int(labels[train_idx].sum()),
        "batch_positive_counts": batch_pos,
        "val_indices": [int(i) for i in val_idx],
    }
    if has_val:
        probs = softmax(_infer_logits(Xv, Mv, best_params, cfg))
        stats["val_ece"] = float(ece(probs, labels[val_idx], 10))
    return TrainedModel(best_params, cfg, encoder_config, training_stats=stats)


def train(examples, cfg: ModelConfig, encoder_config, val_fraction=0.2) -> TrainedModel:
    from .encoding import encode_many

    if not examples:
        raise TrainingError("no examples to train on")
    X, M = encode_many([e.instance for e in examples], encoder_config, cfg.seq_len)
    labels = np.array([e.label for e in examples])
    return train_arrays(X, M, labels, cfg, encoder_config, val_fraction)


DEFAULT_GRID = {
    "l2_lambda": (0.0, 1e-4, 1e-3),
    "dropout_rate": (0.0, 0.2, 0.5),
    "gru_units": (16, 32, 64),
}


class SearchError(RuntimeError):
    pass


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    points = [{}]
    for key in ("l2_lambda", "dropout_rate", "gru_units"):
        if key not in grid:
            continue
        points = [dict(p, **{key: v}) for p in points for v in grid[key]]
    return points


def hyperparameter_search(X, M, labels, base: ModelConfig, grid, encoder_config=None,
                          val_fraction=0.2) -> TrainedModel:
    """Train one model per grid point and keep the best validation AUC.

    Ties go to fewer GRU units, then the earlier grid point. Every point
    sees the same train/validation split; its weights are seeded from the
    base seed and the grid index.
    """
    points = grid if isinstance(grid, list) else expand_grid(grid)
    if not points:
        raise SearchError("empty hyperparameter grid")
    labels = np.asarray(labels, dtype=int)
    split = stratified_split(labels, val_fraction, base.seed)
    results = []
    for i, point in enumerate(points):
        cfg = replace(base, seed=base.seed + 7919 * i, **point)
        try:
            model = train_arrays(X, M, labels, cfg, encoder_config, split=split)
        except (TrainingError, NumericError, ModelError) as exc:
            log.warning("grid point %d %s failed: %s", i, point, exc)
            results.append((i, point, None))
            continue
        log.info("grid point %d %s val_auc %.4f", i, point, model.training_stats["val_auc"])
        results.append((i, point, model))
    ok = [(i, p, m) for i, p, m in results if m is not None]
    if not ok:
        raise SearchError("every grid point failed")
    i, point, best = max(
        ok, key=lambda r: (np.nan_to_num(r[2].training_stats["val_auc"], nan=-1.0),
                           -r[2].config.gru_units, -r[0])
    )
    best.training_stats["grid"] = [
        {"index": j, **p, "val_auc": (m.training_stats["val_auc"] if m else None)} for j, p, m in results
    ]
    best.training_stats["selected_index"] = i
    return best
