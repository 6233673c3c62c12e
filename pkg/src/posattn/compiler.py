"""Compile a PCOC instance into positional-transformer weights and check it.

Layout of the compiled network (``n = N + 1`` rows, ``d_x = s + 1`` columns):

* rows ``1..N`` are machines; row ``n`` is a sink that absorbs every value no
  machine receives and is cleared each layer;
* columns ``1..s`` hold memory, the last column holds the identifier
  ``row / n``, which each layer copies through unchanged.

Layer ``l`` simulates round ``l``: head ``h`` moves memory slot ``h`` along the
round's routing (``W_K = I``, ``W_Q`` a temperature-scaled +-1 pattern), ``W_V``
is the identity and ``W_O`` keeps slot ``h`` of head ``h``. The MLP dispatches
on the identifier to an exact ReLU network for that machine's local function.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelConfig, ModelParams, layer_forward, positional_attention, save_checkpoint
from .pcoc import IDENTITY, InvalidInstanceError, LocalFn, PCOCInstance, run, validate


class CompileError(ValueError):
    pass


# --------------------------------------------------------------------------
# attention patterns


def hardmax_params(pattern, eps: float):
    """Query/key weights whose softmax is within ``eps`` of a one-per-row pattern.

    ``W_K = I`` and ``W_Q = T (2 pattern - 1)`` with ``T = ln(n / eps) / 2``.
    """
    A = np.asarray(pattern, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"pattern must be square, got shape {A.shape}")
    if not np.all((A == 0) | (A == 1)) or not np.all(A.sum(axis=1) == 1):
        raise ValueError("pattern must be binary with exactly one 1 per row")
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    n = A.shape[0]
    T = 0.5 * math.log(n / eps)
    return T * (2.0 * A - 1.0), np.eye(n), T


@dataclass
class RoutingSet:
    """Per-slot (source, destination) pairs of one round, plus the sink completion."""

    N: int
    pairs: dict[int, list[tuple[int, int]]]

    @property
    def sink(self) -> int:
        return self.N + 1

    def augmented(self, z: int) -> list[tuple[int, int]]:
        """Routed pairs for slot ``z`` plus (source, sink) for every unused source."""
        used = self.pairs.get(z, [])
        sources = {i for i, _ in used}
        return used + [(i, self.sink) for i in range(1, self.N + 1) if i not in sources]

    def pattern(self, z: int) -> np.ndarray:
        """Binary (dest, source) matrix of the augmented set, shape (N+1, N+1)."""
        A = np.zeros((self.N + 1, self.N + 1))
        for i, j in self.augmented(z):
            A[j - 1, i - 1] = 1.0
        return A


def routing_set(instance: PCOCInstance, r: int) -> RoutingSet:
    pairs: dict[int, list[tuple[int, int]]] = {}
    for i in range(1, instance.N + 1):
        for j, K in instance.rcv(r, i):
            for z in K:
                pairs.setdefault(z, []).append((j, i))
    return RoutingSet(instance.N, pairs)


def received_mask(instance: PCOCInstance, r: int) -> np.ndarray:
    """(N+1, s) indicator of slots each row receives in round ``r``; the sink row is empty."""
    mask = np.zeros((instance.N + 1, instance.s))
    for i in range(1, instance.N + 1):
        for _, K in instance.rcv(r, i):
            mask[i - 1, [z - 1 for z in K]] = 1.0
    return mask


# --------------------------------------------------------------------------
# exact local functions


def relu_min_mlp():
    """(W1, W2) with min(a, b) = W2 . relu(W1^T [a, b]) exactly."""
    W1 = np.array([[1.0, -1.0, 1.0, -1.0], [1.0, -1.0, -1.0, 1.0]])
    W2 = 0.5 * np.array([[1.0], [-1.0], [-1.0], [-1.0]])
    return W1, W2


def relu_max_mlp():
    W1 = np.array([[1.0, -1.0, 1.0, -1.0], [1.0, -1.0, -1.0, 1.0]])
    W2 = 0.5 * np.array([[1.0], [-1.0], [1.0], [1.0]])
    return W1, W2


def _apply_pair(weights, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    W1, W2 = weights
    h = np.maximum(np.stack([a, b], axis=-1) @ W1, 0.0)
    return (h @ W2)[..., 0]


def _local(op: str, z: np.ndarray, s: int) -> np.ndarray:
    """Apply a supported local function to received vectors ``z`` (k, s)."""
    if op == "identity":
        return z
    if op == "zero":
        return np.zeros_like(z)
    if op == "sum":
        out = z.sum(axis=1)
    else:
        weights = relu_min_mlp() if op == "min" else relu_max_mlp()
        out = z[:, 0]
        for k in range(1, s):
            out = _apply_pair(weights, out, z[:, k])
    return np.repeat(out[:, None], s, axis=1)


class DispatchMLP:
    """Per-row local functions selected by the identifier column."""

    def __init__(self, N: int, s: int, ops: list[str], mask: np.ndarray):
        self.N, self.s = N, s
        self.ops = ops  # length N + 1, last is the sink
        self.mask = mask

    def __call__(self, U: Tensor) -> Tensor:
        s, n = self.s, self.N + 1
        data = U.data
        z = data[..., :s]
        ident = data[..., -1]
        rows = np.rint(ident * n).astype(np.intp) - 1
        out = np.zeros(data.shape[:-1] + (s + 1,))
        out[..., s] = ident
        flat_rows = rows.reshape(-1)
        flat_z = z.reshape(-1, s)
        flat_out = out.reshape(-1, s + 1)
        for row in np.unique(flat_rows):
            sel = flat_rows == row
            received = flat_z[sel] * self.mask[row]
            flat_out[sel, :s] = _local(self.ops[row], received, s)
        return Tensor(out)


# --------------------------------------------------------------------------
# compiled network


@dataclass
class CompiledNetwork:
    instance: PCOCInstance
    eps: float
    T: float
    params: ModelParams
    mlps: list[DispatchMLP] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.instance.N + 1

    def encode(self, x) -> np.ndarray:
        """Input rows for values ``x`` of shape (N,) or (B, N)."""
        P = self.instance
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        X = np.zeros((x.shape[0], self.n, P.s + 1))
        X[:, : P.N, : P.s] = x[:, :, None]
        X[:, :, P.s] = np.arange(1, self.n + 1) / self.n
        return X[0] if single else X

    def attention(self, layer: int) -> list[Tensor]:
        P = np.eye(self.n)
        return [
            positional_attention(
                P, self.params[f"layer.{layer}.head.{h}.W_Q"], self.params[f"layer.{layer}.head.{h}.W_K"]
            )
            for h in range(1, self.instance.s + 1)
        ]

    def forward(self, x, keep_layers: bool = False):
        """Run every layer; returns the final rows (and every layer's rows if asked)."""
        X = Tensor(self.encode(x))
        layers = []
        for layer in range(1, self.instance.R + 1):
            W_Vs = [self.params[f"layer.{layer}.head.{h}.W_V"] for h in range(1, self.instance.s + 1)]
            X = layer_forward(X, self.attention(layer), W_Vs, self.params[f"layer.{layer}.W_O"], self.mlps[layer - 1])
            layers.append(X.data)
        return (X.data, layers) if keep_layers else X.data

    def memories(self, x) -> np.ndarray:
        """Machine memories decoded from the final rows."""
        return self.forward(x)[..., : self.instance.N, : self.instance.s]

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(self.params, path)
        side = {
            "instance": self.instance.describe(),
            "eps": self.eps,
            "temperature": self.T,
            "local_ops": [m.ops for m in self.mlps],
        }
        path.with_suffix(".instance.json").write_text(json.dumps(side, indent=1))


def compile_round(instance: PCOCInstance, r: int, eps: float) -> tuple[dict[str, np.ndarray], float]:
    """Attention, value and output weights for round ``r``, keyed by parameter path."""
    report = validate(instance)
    if not report:
        raise InvalidInstanceError(report.message)
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    s, n = instance.s, instance.N + 1
    T = 0.5 * math.log(n / eps)
    routing = routing_set(instance, r)
    weights: dict[str, np.ndarray] = {}
    for h in range(1, s + 1):
        pre = f"layer.{r}.head.{h}"
        weights[f"{pre}.W_Q"] = T * (2.0 * routing.pattern(h) - 1.0)
        weights[f"{pre}.W_K"] = np.eye(n)
        weights[f"{pre}.W_V"] = np.eye(s + 1)
    W_O = np.zeros((s * (s + 1), s))
    for h in range(1, s + 1):
        W_O[(h - 1) * (s + 1) + (h - 1), h - 1] = 1.0
    weights[f"layer.{r}.W_O"] = W_O
    return weights, T


def _local_ops(instance: PCOCInstance, r: int) -> list[str]:
    ops = []
    for i in range(1, instance.N + 1):
        fn = instance.local_fn(r, i)
        if not isinstance(fn, LocalFn):
            raise CompileError(f"round {r}, machine {i}: unsupported local function {fn!r}")
        ops.append(fn.op)
    return ops + ["zero"]


def compile(instance: PCOCInstance, eps: float) -> CompiledNetwork:
    """One layer per round, ``s`` heads per layer."""
    report = validate(instance)
    if not report:
        raise InvalidInstanceError(report.message)
    s, N, R = instance.s, instance.N, instance.R
    config = ModelConfig(
        max_len=N, attention_kind="positional", num_layers=R, heads=s,
        d_x=s + 1, d_v=s + 1, d_o=s, mlp_hidden=4,
    )
    tensors: dict[str, Tensor] = {}
    mlps = []
    T = 0.5 * math.log((N + 1) / eps) if 0 < eps < 1 else float("nan")
    for r in range(1, R + 1):
        weights, T = compile_round(instance, r, eps)
        tensors.update({k: Tensor(v) for k, v in weights.items()})
        mlps.append(DispatchMLP(N, s, _local_ops(instance, r), received_mask(instance, r)))
    return CompiledNetwork(instance, eps, T, ModelParams(config, tensors), mlps)


# --------------------------------------------------------------------------
# verification


@dataclass
class VerifyReport:
    trials: int
    tol: float
    per_round: list[float]
    max_deviation: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tol

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "tol": self.tol,
            "per_round": self.per_round,
            "max_deviation": self.max_deviation,
            "passed": self.passed,
        }


def default_tolerance(net: CompiledNetwork) -> float:
    return 1e3 * net.eps * net.instance.s * max(net.instance.R, 1)


def verify(
    net: CompiledNetwork,
    instance: PCOCInstance,
    trials: int = 1000,
    tol: float | None = None,
    seed: int = 0,
    bound: float = 2.0,
) -> VerifyReport:
    """Compare network rows with simulator memories on random inputs, round by round."""
    tol = default_tolerance(net) if tol is None else tol
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-bound, bound, size=(trials, instance.N))
    _, layers = net.forward(xs, keep_layers=True)
    per_round = np.zeros(instance.R)
    final = 0.0
    for t, x in enumerate(xs):
        mem, log = run(instance, x, trace=True)
        for r, entry in enumerate(log):
            got = layers[r][t, : instance.N, : instance.s]
            per_round[r] = max(per_round[r], float(np.max(np.abs(got - np.asarray(entry["memory"])))))
        if instance.R:
            final = max(final, float(np.max(np.abs(layers[-1][t, : instance.N, : instance.s] - mem))))
    worst = max(final, float(per_round.max()) if instance.R else 0.0)
    return VerifyReport(trials, tol, per_round.tolist(), worst)
