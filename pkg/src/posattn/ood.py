"""How often OOD test lists still fall inside the training box, and attention dumps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, forward
from .tasks import TaskKind, in_domain_fraction, sample_test_ood


@dataclass(frozen=True)
class OverlapBound:
    n: int
    c: float
    p_in_upper: float
    branch: str


def p_in_bound(n: int, c: float) -> OverlapBound:
    """Upper bound on P(test list of length n at scale c lies in the training box).

    For n >= 3: the term for "exactly one bound inside the box" plus the
    term for "bounds on either side of it". For n = 2 the probability itself,
    in closed form. Values are capped at 1, which the n >= 3 expression
    exceeds for c close to 1.
    """
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    if not c > 1:
        raise ValueError(f"c must exceed 1, got {c}")
    if n == 2:
        one_inside = 0.5 * (2.0 - (c - 1.0) * math.log((c + 1.0) / (c - 1.0)))
        straddle = 2.0 * math.log((c + 1.0) ** 2 / (4.0 * c)) / (c - 1.0)
        return OverlapBound(n, c, min(1.0, (2.0 * one_inside + straddle) / (c + 1.0)), "n=2")
    one_inside = (3.0 * (1.0 - c ** -(n - 1)) + 1.0) / (2.0 * (c * c - 1.0) * (n - 1))
    straddle = (2.0 - 4.0 * (2.0 / (1.0 + c)) ** (n - 2) + 2.0 * c ** -(n - 2)) / (
        (n - 1) * (n - 2) * (c * c - 1.0)
    )
    return OverlapBound(n, c, min(1.0, one_inside + straddle), "n>=3")


def simplified_n2_bound(c: float) -> float:
    """(3(1 - 1/c) + 9/8) / (2(c^2 - 1)).

    Matches the exact n = 2 probability's order of magnitude and dominates it
    at c = 2 (0.4375 vs 0.379), but drops below it for c >= 3; kept for
    comparison only.
    """
    if not c > 1:
        raise ValueError(f"c must exceed 1, got {c}")
    return (3.0 * (1.0 - 1.0 / c) + 9.0 / 8.0) / (2.0 * (c * c - 1.0))


def chernoff_tail(N: int, p: float, eps: float) -> float:
    """Additive Chernoff bound exp(-2 N eps^2) on P(N_in >= N (p + eps))."""
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return math.exp(-2.0 * N * eps * eps)


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    half_width: float
    trials: int

    @property
    def upper(self) -> float:
        return self.estimate + self.half_width


def monte_carlo_p_in(n: int, c: float, trials: int = 100_000, seed: int = 0) -> MonteCarloEstimate:
    """Fraction of OOD test draws inside [-2, 2]^n with a binomial 3-sigma half-width."""
    if trials < 10_000:
        raise ValueError("use at least 10^4 trials")
    batches = sample_test_ood(TaskKind.CUMULATIVE_SUM, n, trials, c, seed, length=n)
    p = in_domain_fraction(batches)
    return MonteCarloEstimate(p, 3.0 * math.sqrt(max(p * (1.0 - p), 0.0) / trials), trials)


def bound_grid(ns=(2, 4, 8, 16, 32), cs=range(2, 11)) -> list[dict]:
    return [{"n": n, "c": c, "p_in_upper": p_in_bound(n, c).p_in_upper} for n in ns for c in cs]


def attn_dump(params: ModelParams, x, scales) -> list[dict]:
    """Per-layer, per-head attention matrices for each input ``c * x``.

    Batched standard-model attention is reported for the single input row.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    out = []
    for c in scales:
        _, attention = forward(params, c * x, keep_attention=True)
        for layer, heads in enumerate(attention, start=1):
            for head, A in enumerate(heads, start=1):
                M = A.data if A.data.ndim == 2 else A.data[0]
                out.append({"layer": layer, "head": head, "scale": float(c), "matrix": M.tolist()})
    return out
