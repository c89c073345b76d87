"""Residual losses for the Euler-Lagrange networks and the objective-penalty baselines.

Component order for the Euler-Lagrange loss is
``L_x, L_x0, L_p*, L_pf*, L_u*`` (one adjoint, terminal and control term
per player); for the penalty baselines it is one dynamics residual and one
initial-condition term per state component followed by one ``L_J`` per
player.

Each assembler exists twice: a tape version looping over collocation points
(exact reference for gradient checks) and a batched version over arrays,
used by the training loop.  Both go through :func:`ocp.el_residuals`, so
the residual formulas are written once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import mlp
from . import ocp
from . import scalar_algebra as sa

__all__ = [
    "UnsupportedBaseline",
    "CollocationSet",
    "LossBreakdown",
    "FixedWeights",
    "AdaptiveState",
    "el_component_names",
    "pinn_component_names",
    "el_components",
    "el_components_batch",
    "pinn_components",
    "pinn_components_batch",
    "objective_penalty",
    "compose_fixed",
    "compose_adaptive",
    "pinns_loss",
]


class UnsupportedBaseline(ValueError):
    """The problem has no registered objective penalty ``L_J``."""


@dataclass(frozen=True)
class CollocationSet:
    interior: np.ndarray
    t0: float
    tf: float

    @classmethod
    def uniform(cls, t0: float, tf: float, n: int = 1000) -> "CollocationSet":
        """``n`` equally spaced points strictly inside ``(t0, tf)``."""
        j = np.arange(1, n + 1)
        return cls(t0 + (tf - t0) * j / (n + 1), float(t0), float(tf))

    @classmethod
    def random(cls, t0: float, tf: float, n: int, rng) -> "CollocationSet":
        t = rng.uniform(t0, tf, n)
        # uniform() may return t0 exactly
        t = np.where(t <= t0, 0.5 * (t0 + tf), t)
        return cls(np.sort(t), float(t0), float(tf))

    @classmethod
    def for_problem(cls, prob: ocp.OcProblem, n: int = 1000) -> "CollocationSet":
        return cls.uniform(prob.t0, prob.tf, n)


@dataclass
class LossBreakdown:
    names: tuple[str, ...]
    values: tuple

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise ValueError("names and values differ in length")

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, name: str):
        return self.values[self.names.index(name)]

    def as_dict(self) -> dict:
        return {k: sa.value_of(v) for k, v in zip(self.names, self.values)}


@dataclass(frozen=True)
class FixedWeights:
    values: tuple[float, ...]

    def __post_init__(self):
        if any(w < 0 for w in self.values):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in self.values):
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def from_mapping(cls, names: Sequence[str], overrides: Mapping[str, float] | None = None,
                     default: float = 1.0) -> "FixedWeights":
        overrides = dict(overrides or {})
        unknown = set(overrides) - set(names)
        if unknown:
            raise ValueError(f"unknown loss components {sorted(unknown)}; have {list(names)}")
        return cls(tuple(float(overrides.get(k, default)) for k in names))

    @classmethod
    def ones(cls, k: int) -> "FixedWeights":
        return cls((1.0,) * k)


@dataclass
class AdaptiveState:
    """Log-variances ``s_k``; the effective weight of component k is ``exp(-s_k)``."""

    s: np.ndarray

    @classmethod
    def initial(cls, k: int, rng) -> "AdaptiveState":
        return cls(np.asarray(rng.normal(0.0, 1.0, k), dtype=float))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(-np.asarray(self.s))


def _suffixed(base: str, count: int) -> list[str]:
    return [base] if count == 1 else [f"{base}{i + 1}" for i in range(count)]


def el_component_names(prob: ocp.OcProblem) -> tuple[str, ...]:
    P = prob.players
    return tuple(["L_x", "L_x0"] + _suffixed("L_p", P) + _suffixed("L_pf", P)
                 + _suffixed("L_u", P))


def pinn_component_names(prob: ocp.OcProblem) -> tuple[str, ...]:
    return tuple(_suffixed("L_r", prob.n) + _suffixed("L_i", prob.n)
                 + _suffixed("L_J", prob.players))


def _sq(values):
    return sa.tree_sum([v * v for v in values])


def _split_players(prob, flat):
    n = prob.n
    return [list(flat[i * n:(i + 1) * n]) for i in range(prob.players)]


def _check_dims(prob, nets):
    if nets["x"].config.output_dim != prob.n:
        raise ValueError(f"state network outputs {nets['x'].config.output_dim}, need {prob.n}")
    if nets["u"].config.output_dim != prob.m:
        raise ValueError(f"control network outputs {nets['u'].config.output_dim}, need {prob.m}")
    if "p" in nets and nets["p"].config.output_dim != prob.n * prob.players:
        raise ValueError(f"adjoint network outputs {nets['p'].config.output_dim}, "
                         f"need {prob.n * prob.players}")


# --- tape route ------------------------------------------------------------------

def el_components(prob: ocp.OcProblem, nets: Mapping[str, mlp.TapedParams],
                  colloc: CollocationSet) -> LossBreakdown:
    """Euler-Lagrange loss components on the scalar tape.

    ``nets`` maps ``"x"``, ``"u"``, ``"p"`` to parameters registered on one
    tape.  Cost grows with network size times collocation count; intended
    for small networks.
    """
    _check_dims(prob, nets)
    P = prob.players
    acc = {"x": [], "p": [[] for _ in range(P)], "u": [[] for _ in range(P)]}
    for t in colloc.interior:
        t = float(t)
        xd = mlp.forward_dual(nets["x"], t)
        pdl = mlp.forward_dual(nets["p"], t)
        u = mlp.forward(nets["u"], t)
        x = [d.primal for d in xd]
        xdot = [d.tangent for d in xd]
        p = _split_players(prob, [d.primal for d in pdl])
        pdot = _split_players(prob, [d.tangent for d in pdl])
        r = ocp.el_residuals(prob, t, x, xdot, u, p, pdot)
        acc["x"].append(_sq(r["x"]))
        for i in range(P):
            acc["p"][i].append(_sq(r["p"][i]))
            acc["u"][i].append(_sq(r["u"][i]))
    N = len(colloc.interior)
    x_t0 = mlp.forward(nets["x"], colloc.t0)
    x_tf = mlp.forward(nets["x"], colloc.tf)
    p_tf = _split_players(prob, mlp.forward(nets["p"], colloc.tf))
    b = ocp.boundary_residuals(prob, x_t0, p_tf, x_tf)
    values = ([sa.tree_sum(acc["x"]) / N, _sq(b["x0"])]
              + [sa.tree_sum(acc["p"][i]) / N for i in range(P)]
              + [_sq(b["pf"][i]) for i in range(P)]
              + [sa.tree_sum(acc["u"][i]) / N for i in range(P)])
    return LossBreakdown(el_component_names(prob), tuple(values))


def _penalty_values(prob, integrand_samples, x_tf, mean):
    out = []
    for i, term in enumerate(prob.penalties):
        total = 0.0
        if term.integrand is not None:
            total = mean(integrand_samples[i])
        if term.terminal is not None:
            total = total + term.terminal(x_tf)
        out.append(total * total if term.square else total)
    return out


def _require_penalties(prob):
    if prob.penalties is None:
        raise UnsupportedBaseline(
            f"no stable objective penalty L_J is registered for {prob.name}; "
            "the PINN/AW-PINN baselines do not apply")


def pinn_components(prob: ocp.OcProblem, nets: Mapping[str, mlp.TapedParams],
                    colloc: CollocationSet, include_penalty: bool = True) -> LossBreakdown:
    """Objective-penalty baseline components on the scalar tape (no adjoint network)."""
    _require_penalties(prob)
    _check_dims(prob, nets)
    n, P = prob.n, prob.players
    res = [[] for _ in range(n)]
    integrand = [[] for _ in range(P)]
    for t in colloc.interior:
        t = float(t)
        xd = mlp.forward_dual(nets["x"], t)
        u = mlp.forward(nets["u"], t)
        x = [d.primal for d in xd]
        fx = prob.f(t, x, u)
        for k in range(n):
            r = xd[k].tangent - fx[k]
            res[k].append(r * r)
        for i, term in enumerate(prob.penalties):
            if term.integrand is not None:
                integrand[i].append(term.integrand(t, x, u))
    N = len(colloc.interior)
    x_t0 = mlp.forward(nets["x"], colloc.t0)
    x_tf = mlp.forward(nets["x"], colloc.tf)
    values = [sa.tree_sum(r) / N for r in res]
    values += [(a - b) * (a - b) for a, b in zip(x_t0, prob.x0)]
    if include_penalty:
        values += _penalty_values(prob, integrand, x_tf, lambda s: sa.tree_sum(s) / len(s))
    else:
        values += [0.0] * P
    return LossBreakdown(pinn_component_names(prob), tuple(values))


def objective_penalty(prob: ocp.OcProblem, nets: Mapping[str, mlp.TapedParams],
                      colloc: CollocationSet) -> list:
    """``L_J`` per player, on the tape."""
    b = pinn_components(prob, nets, colloc)
    return [b[k] for k in b.names if k.startswith("L_J")]


# --- batched route -----------------------------------------------------------------

def el_components_batch(prob: ocp.OcProblem, t, x, xdot, u, p, pdot, x_t0, x_tf, p_tf,
                        mean=None) -> LossBreakdown:
    """Euler-Lagrange components from network outputs sampled on a batch.

    ``x``, ``xdot`` have shape ``(N, n)``; ``u`` ``(N, m)``; ``p``, ``pdot``
    ``(N, P*n)``; ``x_t0``, ``x_tf`` ``(n,)``; ``p_tf`` ``(P*n,)``.  Works on
    numpy or JAX arrays.
    """
    if mean is None:
        mean = _mean_for(x)
    P = prob.players
    cols = lambda a: [a[:, k] for k in range(a.shape[1])]  # noqa: E731
    r = ocp.el_residuals(prob, t, cols(x), cols(xdot), cols(u),
                         _split_players(prob, cols(p)), _split_players(prob, cols(pdot)))
    b = ocp.boundary_residuals(prob, list(x_t0), _split_players(prob, list(p_tf)), list(x_tf))
    values = ([mean(_sq(r["x"])), _sq(b["x0"])]
              + [mean(_sq(r["p"][i])) for i in range(P)]
              + [_sq(b["pf"][i]) for i in range(P)]
              + [mean(_sq(r["u"][i])) for i in range(P)])
    return LossBreakdown(el_component_names(prob), tuple(values))


def pinn_components_batch(prob: ocp.OcProblem, t, x, xdot, u, x_t0, x_tf,
                          include_penalty: bool = True, mean=None) -> LossBreakdown:
    _require_penalties(prob)
    if mean is None:
        mean = _mean_for(x)
    cols = lambda a: [a[:, k] for k in range(a.shape[1])]  # noqa: E731
    xs, us = cols(x), cols(u)
    fx = prob.f(t, xs, us)
    values = [mean((xdot[:, k] - fx[k]) ** 2) for k in range(prob.n)]
    values += [(x_t0[k] - prob.x0[k]) ** 2 for k in range(prob.n)]
    if include_penalty:
        samples = [term.integrand(t, xs, us) if term.integrand is not None else None
                   for term in prob.penalties]
        values += _penalty_values(prob, samples, list(x_tf), mean)
    else:
        values += [0.0 * values[0]] * prob.players
    return LossBreakdown(pinn_component_names(prob), tuple(values))


def _mean_for(a):
    if isinstance(a, np.ndarray):
        return np.mean
    from ._jax import jnp

    return jnp.mean


# --- composition --------------------------------------------------------------------

def compose_fixed(b: LossBreakdown, w) -> object:
    """``sum_k w_k L_k``."""
    w = w.values if isinstance(w, FixedWeights) else tuple(w)
    if len(w) != len(b):
        raise ValueError(f"{len(w)} weights for {len(b)} loss components")
    return sa.tree_sum([wk * lk for wk, lk in zip(w, b.values)])


def compose_adaptive(b: LossBreakdown, s) -> object:
    """``sum_k exp(-s_k) L_k + sum_k s_k``.

    ``s`` may be an :class:`AdaptiveState`, a sequence of tape variables or
    a (JAX) array.
    """
    if isinstance(s, AdaptiveState):
        s = s.s
    if len(s) != len(b):
        raise ValueError(f"{len(s)} log-variances for {len(b)} loss components")
    if not isinstance(s, (list, tuple)) and not isinstance(s, np.ndarray):
        # JAX array: vectorized form
        from ._jax import jnp

        lk = jnp.stack([jnp.asarray(v) for v in b.values])
        return jnp.sum(jnp.exp(-s) * lk) + jnp.sum(s)
    terms = [sa.exp(-sk) * lk for sk, lk in zip(s, b.values)]
    return sa.tree_sum(terms) + sa.tree_sum(list(s))


def pinns_loss(prob: ocp.OcProblem, nets: Mapping[str, mlp.TapedParams],
               colloc: CollocationSet, weights, include_penalty: bool = True):
    """Objective-penalty baseline loss, fixed (PINN) or adaptive (AW-PINN) weighted."""
    b = pinn_components(prob, nets, colloc, include_penalty=include_penalty)
    if isinstance(weights, AdaptiveState) or (
            isinstance(weights, (list, tuple)) and weights and isinstance(weights[0], sa.TapeVar)):
        return compose_adaptive(b, weights)
    return compose_fixed(b, weights)
