"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from ..errors import NondeterministicObjectiveError
from .optim import ParamStore


def grad_check(store: ParamStore, objective, eps: float = 1e-5):
    """Compare reverse-mode gradients against central differences.

    `objective` is a zero-argument callable returning a scalar Tensor built
    from the store's parameters. It must be deterministic: any stochastic
    element (and anything the gradient is defined to ignore, like sample
    coordinates or a matching decision) must be frozen by the caller.

    Returns (max_relative_error, {param_name: per_param_error}). The
    relative error of one parameter is |g_ad - g_fd| / max(1e-8, |g_ad| +
    |g_fd|) with |.| the Euclidean norm over that parameter's coordinates
    (finite differences still probe one coordinate at a time). A
    per-coordinate quotient would be dominated by coordinates whose true
    gradient happens to cancel to ~1e-8, where central differences return
    pure roundoff; the norm form scales the comparison to the parameter's
    actual gradient magnitude while any systematic backward error still
    shifts the norm far above tolerance.
    """
    f0 = float(objective().data)
    f1 = float(objective().data)
    if f0 != f1:
        raise NondeterministicObjectiveError(
            f"objective returned {f0!r} then {f1!r} on identical state")

    store.zero_grad()
    loss = objective()
    loss.backward()
    analytic = {}
    for name in store.names():
        g = store.params[name].grad
        analytic[name] = np.zeros(store.params[name].data.shape) if g is None else g.copy()

    per_param = {}
    worst = 0.0
    for name in store.names():
        data = store.params[name].data
        flat = data.reshape(-1)
        g_ad = analytic[name].reshape(-1)
        g_fd = np.empty(flat.size)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = float(objective().data)
            flat[i] = keep - eps
            f_minus = float(objective().data)
            flat[i] = keep
            g_fd[i] = (f_plus - f_minus) / (2.0 * eps)
        gap = float(np.linalg.norm(g_ad - g_fd))
        scale = max(1e-8, float(np.linalg.norm(g_ad)) + float(np.linalg.norm(g_fd)))
        err = gap / scale
        per_param[name] = err
        if err > worst:
            worst = err
    return worst, per_param
