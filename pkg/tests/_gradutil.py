"""Finite-difference helpers shared by the model and acceptance tests."""

import numpy as np

from posattn import autodiff as ad
from posattn import model as model_mod
from posattn.model import forward, init_params


def loss_and_grads(params, x, y):
    leaves = params.parameters()
    with ad.Tape() as tape:
        loss = ad.masked_mse(forward(params, x), y)
    ad.backward(loss, tape, leaves=leaves)
    return loss.item(), [t.grad.copy() for t in leaves]


def finite_difference_error(params, x, y, step=1e-4):
    """Max |analytic - central difference| / max(1, |analytic|) over every coordinate."""
    _, grads = loss_and_grads(params, x, y)
    worst = 0.0
    for t, g in zip(params.parameters(), grads):
        flat = t.data.reshape(-1)
        g = g.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + step
            hi = ad.masked_mse(forward(params, x), y).item()
            flat[k] = keep - step
            lo = ad.masked_mse(forward(params, x), y).item()
            flat[k] = keep
            worst = max(worst, abs(g[k] - (hi - lo) / (2 * step)) / max(1.0, abs(g[k])))
    return worst


def relu_margin(params, x) -> float:
    """Smallest |pre-activation| of any MLP hidden unit on input ``x``."""
    seen = []
    original = model_mod.mlp

    def spy(U, W1, b1, W2, b2):
        seen.append(np.abs(U.data @ W1.data + b1.data).min())
        return original(U, W1, b1, W2, b2)

    model_mod.mlp = spy
    try:
        forward(params, x)
    finally:
        model_mod.mlp = original
    return float(min(seen)) if seen else np.inf


def smooth_points(config, count, seed, batch=2, margin=1e-3, length=None):
    """Random (params, x) draws whose ReLUs are all at least ``margin`` from a kink.

    Central differences only estimate a derivative where the loss is smooth
    within the step, so draws sitting on a kink are skipped.
    """
    rng = np.random.default_rng(seed)
    found = 0
    while found < count:
        params = init_params(config, int(rng.integers(2**31)))
        for t in params.parameters():
            if t.data.ndim == 1:
                t.data[...] = rng.uniform(-0.5, 0.5, size=t.shape)
        x = rng.uniform(-2, 2, size=(batch, length or config.max_len))
        if relu_margin(params, x) >= margin:
            found += 1
            yield params, x
