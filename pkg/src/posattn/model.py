"""Positional and standard transformers built on :mod:`posattn.autodiff`.

Each layer computes

    X' = Phi( concat_h(A_h X W_V^h) W_O  (+)  X )

where ``(+)`` is column concatenation and ``Phi`` is a two-layer ReLU MLP.
Positional attention derives ``A_h`` from fixed one-hot encodings only;
standard attention derives it from the layer input (optionally with rotary
position embeddings).

Every sequence carries one scratchpad row (value 0, positional index ``n``)
after its ``m`` value rows. Rows of a length-``m`` input therefore use the
positional indices ``0..m-1`` and ``n``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ATTENTION_KINDS = ("positional", "self", "self_rope")
CHECKPOINT_SCHEMA = "posattn.checkpoint/1"


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    max_len: int
    attention_kind: str = "positional"
    num_layers: int | None = None
    heads: int = 2
    d_x: int = 64
    d_v: int = 32
    d_o: int = 64
    mlp_hidden: int = 64
    d_p: int | None = None

    def __post_init__(self):
        if self.max_len < 1:
            raise ConfigError(f"max_len must be positive, got {self.max_len}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}, got {self.attention_kind!r}")
        if self.num_layers is None:
            self.num_layers = default_num_layers(self.max_len)
        if self.d_p is None:
            self.d_p = self.max_len + 1
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be non-negative, got {self.num_layers}")
        for name in ("heads", "d_x", "d_v", "d_o", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_p < self.seq_len:
            raise ConfigError(f"one-hot encodings need d_p >= {self.seq_len}, got {self.d_p}")
        if self.attention_kind == "self_rope" and self.d_x % 2:
            raise ConfigError(f"rotary embeddings need an even d_x, got {self.d_x}")

    @property
    def seq_len(self) -> int:
        """Rows per full-length input: ``max_len`` values plus the scratchpad."""
        return self.max_len + 1

    @property
    def d_in(self) -> int:
        return 1 + self.d_p if self.attention_kind == "self" else 1

    @property
    def d_m(self) -> int:
        return self.d_p if self.attention_kind == "positional" else self.d_x

    def to_dict(self) -> dict:
        return asdict(self)


def default_num_layers(n: int) -> int:
    return math.ceil(math.log2(n)) + 1 if n > 1 else 1


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered map from parameter path to shape; the init draw order."""
    c = config
    qk_rows = c.d_p if c.attention_kind == "positional" else c.d_x
    shapes: dict[str, tuple[int, ...]] = {"encoder.E": (c.d_in, c.d_x)}
    for layer in range(1, c.num_layers + 1):
        for head in range(1, c.heads + 1):
            pre = f"layer.{layer}.head.{head}"
            shapes[f"{pre}.W_Q"] = (qk_rows, c.d_m)
            shapes[f"{pre}.W_K"] = (qk_rows, c.d_m)
            shapes[f"{pre}.W_V"] = (c.d_x, c.d_v)
        shapes[f"layer.{layer}.W_O"] = (c.heads * c.d_v, c.d_o)
        shapes[f"layer.{layer}.mlp.W1"] = (c.d_o + c.d_x, c.mlp_hidden)
        shapes[f"layer.{layer}.mlp.b1"] = (c.mlp_hidden,)
        shapes[f"layer.{layer}.mlp.W2"] = (c.mlp_hidden, c.d_x)
        shapes[f"layer.{layer}.mlp.b2"] = (c.d_x,)
    shapes["decoder.D"] = (c.d_x, 1)
    return shapes


@dataclass
class ModelParams:
    """Learnable tensors keyed by path, e.g. ``layer.2.head.1.W_Q``.

    The positional matrix is not a parameter: it is the fixed identity
    returned by :func:`positional_encodings`.
    """

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.tensors[k].data[...] = v


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for path, shape in param_shapes(config).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(1.0 / shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        tensors[path] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


# --------------------------------------------------------------------------
# building blocks


def positional_encodings(config: ModelConfig) -> np.ndarray:
    """One-hot encodings, one row per positional index (the identity for d_p = n+1)."""
    return np.eye(config.seq_len, config.d_p)


def row_positions(m: int, n: int) -> np.ndarray:
    """Positional indices for ``m`` values plus the scratchpad."""
    if m < 1:
        raise LengthError("input must contain at least one value")
    if m > n:
        raise LengthError(f"input length {m} exceeds max_len {n}")
    return np.concatenate([np.arange(m), [n]]).astype(np.intp)


def positional_attention(P, W_Q: Tensor, W_K: Tensor) -> Tensor:
    """softmax((P W_Q)(P W_K)^T); depends on nothing but the encodings and weights."""
    P = P if isinstance(P, Tensor) else Tensor(P)
    return ad.softmax(ad.matmul(ad.matmul(P, W_Q), ad.transpose(ad.matmul(P, W_K))))


def rope_tables(positions: np.ndarray, dim: int, base: float = 10000.0):
    """cos/sin tables and the pair-rotation matrix for rotary embeddings."""
    half = np.arange(dim // 2)
    freqs = base ** (-2.0 * half / dim)
    angles = np.outer(positions.astype(np.float64), np.repeat(freqs, 2))
    rot = np.zeros((dim, dim))
    rot[2 * half + 1, 2 * half] = -1.0
    rot[2 * half, 2 * half + 1] = 1.0
    return np.cos(angles), np.sin(angles), rot


def rope_rotate(Q: Tensor, positions: np.ndarray) -> Tensor:
    """Rotate consecutive column pairs of each row by its position's angles."""
    cos, sin, rot = rope_tables(positions, Q.shape[-1])
    return ad.add(ad.mul(Q, Tensor(cos)), ad.mul(ad.matmul(Q, Tensor(rot)), Tensor(sin)))


def self_attention(X: Tensor, W_Q: Tensor, W_K: Tensor, positions: np.ndarray | None = None) -> Tensor:
    """softmax((X W_Q)(X W_K)^T), with rotary embeddings when ``positions`` is given."""
    Q = ad.matmul(X, W_Q)
    K = ad.matmul(X, W_K)
    if positions is not None:
        Q = rope_rotate(Q, positions)
        K = rope_rotate(K, positions)
    return ad.softmax(ad.matmul(Q, ad.transpose(K)))


def mlp(U: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    return ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(U, W1), b1)), W2), b2)


def layer_forward(
    X: Tensor,
    attns: Sequence[Tensor],
    W_Vs: Sequence[Tensor],
    W_O: Tensor,
    phi: Callable[[Tensor], Tensor],
) -> Tensor:
    """One layer given its attention matrices; ``phi`` maps (d_o + d_x) -> d_x per row."""
    heads = [ad.matmul(A, ad.matmul(X, W_V)) for A, W_V in zip(attns, W_Vs)]
    Z = heads[0] if len(heads) == 1 else ad.concat(heads)
    return phi(ad.concat([ad.matmul(Z, W_O), X]))


# --------------------------------------------------------------------------
# full model


def layer_attention(params: ModelParams, layer: int, X: Tensor, positions: np.ndarray) -> list[Tensor]:
    c = params.config
    out = []
    for head in range(1, c.heads + 1):
        W_Q = params[f"layer.{layer}.head.{head}.W_Q"]
        W_K = params[f"layer.{layer}.head.{head}.W_K"]
        if c.attention_kind == "positional":
            P = positional_encodings(c)[positions]
            out.append(positional_attention(P, W_Q, W_K))
        elif c.attention_kind == "self":
            out.append(self_attention(X, W_Q, W_K))
        else:
            out.append(self_attention(X, W_Q, W_K, positions=positions))
    return out


def encode_inputs(config: ModelConfig, values: np.ndarray) -> np.ndarray:
    """Raw encoder input rows, shape (B, m+1, d_in)."""
    B, m = values.shape
    positions = row_positions(m, config.max_len)
    feats = np.zeros((B, m + 1, config.d_in))
    feats[:, :m, 0] = values
    if config.attention_kind == "self":
        feats[:, :, 1:] = positional_encodings(config)[positions][None]
    return feats


def forward(params: ModelParams, values, keep_attention: bool = False):
    """Batched forward pass.

    ``values`` has shape (B, m). Returns predictions of shape (B, m) and, when
    ``keep_attention`` is set, the per-layer list of per-head attention
    tensors ((m+1, m+1) for positional models, (B, m+1, m+1) otherwise).
    """
    c = params.config
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise LengthError(f"expected a (batch, length) array, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("input values must be finite")
    m = values.shape[1]
    positions = row_positions(m, c.max_len)
    X = ad.matmul(Tensor(encode_inputs(c, values)), params["encoder.E"])
    attention = []
    for layer in range(1, c.num_layers + 1):
        attns = layer_attention(params, layer, X, positions)
        W_Vs = [params[f"layer.{layer}.head.{h}.W_V"] for h in range(1, c.heads + 1)]
        pre = f"layer.{layer}.mlp"

        def phi(U, pre=pre):
            return mlp(U, params[f"{pre}.W1"], params[f"{pre}.b1"], params[f"{pre}.W2"], params[f"{pre}.b2"])

        X = layer_forward(X, attns, W_Vs, params[f"layer.{layer}.W_O"], phi)
        if keep_attention:
            attention.append(attns)
    out = ad.matmul(X, params["decoder.D"])
    out = ad.take(ad.reshape(out, (values.shape[0], m + 1)), np.arange(m), axis=-1)
    return (out, attention) if keep_attention else out


def model_forward(values, config: ModelConfig, params: ModelParams) -> np.ndarray:
    """Predictions for a single input vector of length 1..n."""
    if params.config != config:
        raise ConfigError("params were built for a different config")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise LengthError("input must contain at least one value")
    return forward(params, values[None, :]).data[0]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "config": params.config.to_dict(),
        "params": {
            k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for k, t in params.tensors.items()
        },
    }
    if extra:
        doc["extra"] = extra
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    config = ModelConfig(**doc["config"])
    tensors = {
        k: Tensor(np.array(v["data"], dtype=np.float64).reshape(v["shape"]), requires_grad=True)
        for k, v in doc["params"].items()
    }
    return ModelParams(config, tensors)
