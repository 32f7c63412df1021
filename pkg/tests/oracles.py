"""Independent reference computations used by several test modules."""

import numpy as np

from clickpredict.model import batch_loss, loss_and_grads


def pairwise_auc(p, y):
    """O(n^2) pair count: wins + half ties over all positive/negative pairs."""
    p, y = np.asarray(p, dtype=np.float64), np.asarray(y)
    pos, neg = p[y == 1][:, None], p[y == 0][None, :]
    wins = int((pos > neg).sum())
    ties = int((pos == neg).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def with_random_biases(params, rng, scale=0.1):
    """Copy of ``params`` with nonzero biases.

    Zero biases can put a ReLU exactly on its kink (a unit whose inputs are
    all zero), where the loss has no derivative and central differences are
    meaningless.
    """
    return {k: (rng.normal(0.0, scale, v.shape) if "_b" in k else v.copy()) for k, v in params.items()}


def max_grad_rel_error(X, M, labels, params, cfg, seed=0, h=1e-5):
    """Largest |analytic - numeric| / max(|analytic| + |numeric|, 1e-8) over all parameters.

    Dropout masks are held fixed by reseeding the rng for every evaluation.
    """
    _, grads = loss_and_grads(X, M, labels, params, cfg, rng=np.random.default_rng(seed))
    worst = 0.0
    for name, value in params.items():
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + h
            up = batch_loss(X, M, labels, params, cfg, "train", np.random.default_rng(seed))
            value[idx] = old - h
            down = batch_loss(X, M, labels, params, cfg, "train", np.random.default_rng(seed))
            value[idx] = old
            numeric = (up - down) / (2 * h)
            a = grads[name][idx]
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8))
    return worst
