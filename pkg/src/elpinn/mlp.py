"""Fully connected tanh networks mapping time to a prediction vector.

Weights follow the ``z_j = tanh(W_j z_{j-1} + b_j)`` convention with
``W_j`` of shape ``(out, in)``; the last layer is affine.  Two evaluation
routes share one parameter layout:

* :func:`forward` / :func:`forward_dual` run on the scalar tape, one time
  point at a time.  They are exact but slow and serve as the reference.
* :func:`batch_forward` / :func:`batch_forward_dual` run vectorized over a
  batch of times on numpy or JAX arrays; the training loop uses these.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import scalar_algebra as sa

__all__ = [
    "MlpConfig",
    "MlpParams",
    "TapedParams",
    "init",
    "register",
    "forward",
    "forward_dual",
    "batch_forward",
    "batch_forward_dual",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class MlpConfig:
    hidden_layers: int
    hidden_width: int
    output_dim: int
    input_dim: int = 1
    activation: str = "tanh"
    # (t0, tf) maps the time input affinely onto [-1, 1]; None feeds t raw
    time_range: tuple[float, float] | None = None

    def __post_init__(self):
        if min(self.hidden_layers, self.hidden_width, self.output_dim, self.input_dim) < 1:
            raise ValueError("all layer counts must be >= 1")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.time_range is not None and not self.time_range[1] > self.time_range[0]:
            raise ValueError("time_range must be increasing")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        s = self.sizes
        return [((b, a), (b,)) for a, b in zip(s[:-1], s[1:])]

    def scale(self):
        """(a, c) such that the network sees ``a * t + c``."""
        if self.time_range is None:
            return 1.0, 0.0
        t0, tf = self.time_range
        a = 2.0 / (tf - t0)
        return a, -1.0 - a * t0


@dataclass
class MlpParams:
    config: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        """Layer by layer: weight matrix row-major, then bias."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, config: MlpConfig, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (config.n_params,):
            raise ValueError(f"expected {config.n_params} parameters, got {vec.shape}")
        weights, biases, k = [], [], 0
        for wshape, bshape in config.shapes():
            n = wshape[0] * wshape[1]
            weights.append(vec[k:k + n].reshape(wshape).copy())
            k += n
            biases.append(vec[k:k + bshape[0]].copy())
            k += bshape[0]
        return cls(config, weights, biases)


def init(config: MlpConfig, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases.

    ``seed`` is an int or a ``numpy.random.Generator``; passing a generator
    lets several networks draw from one stream in a fixed order.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for (fan_out, fan_in), (nb,) in config.shapes():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(nb))
    return MlpParams(config, weights, biases)


@dataclass
class TapedParams:
    config: MlpConfig
    weights: list[list[list[sa.TapeVar]]]
    biases: list[list[sa.TapeVar]]
    leaves: list[sa.TapeVar]  # in flat-vector order
    tape: sa.Tape


def register(params: MlpParams, tape: sa.Tape) -> TapedParams:
    """Create one tape leaf per parameter, in flat order."""
    weights, biases, leaves = [], [], []
    for w, b in zip(params.weights, params.biases):
        wl = [[tape.var(v) for v in row] for row in w]
        bl = [tape.var(v) for v in b]
        for row in wl:
            leaves.extend(row)
        leaves.extend(bl)
        weights.append(wl)
        biases.append(bl)
    return TapedParams(params.config, weights, biases, leaves, tape)


def _affine(w_rows, bias, z):
    return [sa.tree_sum([wij * zj for wij, zj in zip(row, z)] + [bj])
            for row, bj in zip(w_rows, bias)]


def forward(tp: TapedParams, t: float) -> list[sa.TapeVar]:
    a, c = tp.config.scale()
    z = [a * t + c]
    last = len(tp.weights) - 1
    for j, (w, b) in enumerate(zip(tp.weights, tp.biases)):
        z = _affine(w, b, z)
        if j < last:
            z = [sa.tanh(v) for v in z]
    return z


def forward_dual(tp: TapedParams, t: float) -> list[sa.DualNode]:
    """Outputs as dual nodes whose tangent is d(output)/dt."""
    a, c = tp.config.scale()
    z = [sa.DualNode(a * t + c, a)]
    last = len(tp.weights) - 1
    for j, (w, b) in enumerate(zip(tp.weights, tp.biases)):
        z = [sa.tree_sum([wij * zj for wij, zj in zip(row, z)] + [bj])
             for row, bj in zip(w, b)]
        if j < last:
            z = [sa.tanh(v) for v in z]
    return z


# --- vectorized route ----------------------------------------------------------

def layers_of(params: MlpParams):
    return list(zip(params.weights, params.biases))


def unflatten_jax(config: MlpConfig, vec):
    """Slice a flat (JAX) vector into [(W, b), ...] without copying to numpy."""
    layers, k = [], 0
    for wshape, bshape in config.shapes():
        n = wshape[0] * wshape[1]
        layers.append((vec[k:k + n].reshape(wshape), vec[k + n:k + n + bshape[0]]))
        k += n + bshape[0]
    return layers


def batch_forward(config: MlpConfig, layers, t):
    """Outputs of shape ``(len(t), output_dim)`` for a 1-D array of times.

    Runs on numpy or JAX arrays; ``layers`` is ``[(W, b), ...]``.
    """
    a, c = config.scale()
    z = (a * t + c)[:, None]
    for w, b in layers[:-1]:
        z = sa.tanh(z @ w.T + b)
    w, b = layers[-1]
    return z @ w.T + b


def batch_forward_dual(config: MlpConfig, layers, t):
    """(outputs, d outputs / dt), both ``(len(t), output_dim)``."""
    from ._jax import jax, jnp

    return jax.jvp(lambda tt: batch_forward(config, layers, tt), (t,), (jnp.ones_like(t),))


# --- checkpoints ---------------------------------------------------------------

_MAGIC = b"ELPNMLP1"
# magic, input_dim, hidden_layers, hidden_width, output_dim, activation code,
# has_time_range, t0, tf, n_params
_HEADER = struct.Struct("<8s6I2dQ")


def save_checkpoint(path, params: MlpParams) -> None:
    cfg = params.config
    tr = cfg.time_range
    header = _HEADER.pack(_MAGIC, cfg.input_dim, cfg.hidden_layers, cfg.hidden_width,
                          cfg.output_dim, 0, int(tr is not None),
                          tr[0] if tr else 0.0, tr[1] if tr else 0.0, cfg.n_params)
    Path(path).write_bytes(header + params.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> MlpParams:
    raw = Path(path).read_bytes()
    magic, din, nl, width, dout, act, has_tr, t0, tf, n = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not an MLP checkpoint")
    if act != 0:
        raise ValueError(f"{path}: unknown activation code {act}")
    cfg = MlpConfig(nl, width, dout, input_dim=din,
                    time_range=(t0, tf) if has_tr else None)
    vec = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if vec.size != n or n != cfg.n_params:
        raise ValueError(f"{path}: parameter count mismatch")
    return MlpParams.from_flat(cfg, vec)
