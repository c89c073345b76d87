"""Training loop for the Euler-Lagrange networks and the penalty baselines.

Two Adam optimizers run side by side: one over the network parameters and,
for the adaptive variants, one over the log-variances ``s_k``.  The
per-iteration work (forward passes, time derivatives, loss, gradients, both
Adam updates) is compiled with JAX and run in chunks of ``trace_interval``
iterations; between chunks the networks are evaluated against the
reference solution and a trace record is appended.

Importing this module enables 64-bit floats in JAX.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import losses
from . import mlp
from . import ocp
from ._jax import jax, jnp

log = logging.getLogger(__name__)

__all__ = [
    "VARIANTS",
    "AdamState",
    "adam_update",
    "adam_step",
    "TrainConfig",
    "MetricsTrace",
    "Evaluation",
    "RunResult",
    "NonFiniteLoss",
    "MissingReference",
    "network_configs",
    "weight_column",
    "train",
    "evaluate",
    "predict",
    "resolve_reference",
]

VARIANTS = ("el", "aw-el", "pinn", "aw-pinn")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration, components):
        super().__init__(f"non-finite loss at iteration {iteration}: {components}")
        self.iteration = iteration
        self.components = components


class MissingReference(LookupError):
    pass


# --- Adam ------------------------------------------------------------------------

def adam_update(m, v, step, g, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(delta, m, v)``.

    Pure arithmetic, so it runs on numpy and JAX arrays alike.
    """
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    return -lr * m_hat / (v_hat ** 0.5 + eps), m, v


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, params, grads) -> np.ndarray:
    """Advance ``state`` by one step and return the updated parameters."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != state.m.shape or grads.shape != state.m.shape:
        raise ValueError(f"length mismatch: state {state.m.shape}, params {params.shape}, "
                         f"grads {grads.shape}")
    state.step += 1
    delta, state.m, state.v = adam_update(state.m, state.v, state.step, grads, state.lr,
                                          state.beta1, state.beta2, state.eps)
    return params + delta


# --- configuration and results -------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    variant: str = "aw-el"
    iterations: int = 30000
    lr_params: float = 1e-4
    lr_s: float = 1e-3
    seed: int = 0
    trace_interval: int = 100
    # fixed variants: component name -> weight (others 1)
    weights: Mapping[str, float] | None = None
    n_colloc: int = 1000
    n_eval: int = 1000
    resample: bool = False
    rescale_time: bool = False
    hidden_layers: int = 4
    widths: tuple[int, int, int] = (50, 30, 40)  # x, u, p networks
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.trace_interval < 1:
            raise ValueError("trace_interval must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def adaptive(self) -> bool:
        return self.variant.startswith("aw-")

    @property
    def uses_adjoint(self) -> bool:
        return self.variant in ("el", "aw-el")

    @classmethod
    def for_problem(cls, prob: ocp.OcProblem, variant: str = "aw-el", **overrides) -> "TrainConfig":
        """Defaults registered with the problem (iterations, learning rates, weights)."""
        d = prob.defaults or ocp.ExperimentDefaults(30000)
        kw = dict(variant=variant, iterations=d.iterations, lr_params=d.lr_params, lr_s=d.lr_s)
        if variant == "el":
            kw["weights"] = dict(d.el_weights)
        elif variant == "pinn":
            kw["weights"] = dict(d.pinn_weights)
        kw.update(overrides)
        return cls(**kw)


def weight_column(component: str) -> str:
    """``L_x0`` -> ``w_x0``: trace column of a component's effective weight."""
    return "w_" + (component[2:] if component.startswith("L_") else component)


@dataclass
class MetricsTrace:
    component_names: tuple[str, ...]
    variable_names: tuple[str, ...]
    records: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return (["iteration", "loss"] + list(self.component_names)
                + [weight_column(k) for k in self.component_names]
                + [f"rle_{v}" for v in self.variable_names])

    def append(self, record: dict):
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("trace iterations must increase")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)


@dataclass
class Evaluation:
    t: np.ndarray
    predicted: ocp.Trajectories
    reference: ocp.Trajectories
    variables: tuple[str, ...]  # states then controls
    abs_err: dict
    rle: dict
    mae: dict
    adjoint_rle: dict = field(default_factory=dict)

    @property
    def avg_rle(self) -> float:
        return float(np.mean([self.rle[v] for v in self.variables]))

    @property
    def avg_mae(self) -> float:
        return float(np.mean([self.mae[v] for v in self.variables]))


@dataclass
class RunResult:
    problem: ocp.OcProblem
    config: TrainConfig
    nets: dict  # "x", "u"[, "p"] -> MlpParams
    s: np.ndarray | None
    trace: MetricsTrace
    evaluation: Evaluation
    components: dict
    status: str = "ok"
    abort: dict | None = None


# --- networks ----------------------------------------------------------------------

def network_configs(prob: ocp.OcProblem, cfg: TrainConfig) -> dict:
    tr = (prob.t0, prob.tf) if cfg.rescale_time else None
    wx, wu, wp = cfg.widths
    out = {"x": mlp.MlpConfig(cfg.hidden_layers, wx, prob.n, time_range=tr),
           "u": mlp.MlpConfig(cfg.hidden_layers, wu, prob.m, time_range=tr)}
    if cfg.uses_adjoint:
        out["p"] = mlp.MlpConfig(cfg.hidden_layers, wp, prob.n * prob.players, time_range=tr)
    return out


def predict(prob: ocp.OcProblem, nets: Mapping[str, mlp.MlpParams], grid) -> ocp.Trajectories:
    t = np.asarray(grid, dtype=float)
    x = mlp.batch_forward(nets["x"].config, mlp.layers_of(nets["x"]), t)
    u = mlp.batch_forward(nets["u"].config, mlp.layers_of(nets["u"]), t)
    p = None
    if "p" in nets:
        p = mlp.batch_forward(nets["p"].config, mlp.layers_of(nets["p"]), t)
        p = p.reshape(len(t), prob.players, prob.n)
    return ocp.Trajectories(t, x, u, p)


def adjoint_names(prob: ocp.OcProblem) -> list[str]:
    if prob.players == 1:
        return ["p"] if prob.n == 1 else [f"p{k + 1}" for k in range(prob.n)]
    if prob.n == 1:
        return [f"p{i + 1}" for i in range(prob.players)]
    return [f"p{i + 1}_{k + 1}" for i in range(prob.players) for k in range(prob.n)]


def resolve_reference(prob: ocp.OcProblem, reference=None, grid=None) -> ocp.Trajectories:
    if reference is not None:
        return reference if grid is None else reference.at(grid)
    if prob.analytic is None:
        raise MissingReference(
            f"{prob.name} has no analytic solution; build one with "
            "classical.tpbvp_reference(prob) (CLI: `elpinn reference`) and pass it in")
    if grid is None:
        grid = np.linspace(prob.t0, prob.tf, 1000)
    return ocp.analytic_eval(prob, grid)


def evaluate(nets: Mapping[str, mlp.MlpParams], prob: ocp.OcProblem, grid=None,
             reference: ocp.Trajectories | None = None) -> Evaluation:
    """Pointwise absolute errors, relative L2 errors and maxima per variable."""
    if grid is None:
        grid = np.linspace(prob.t0, prob.tf, 1000)
    grid = np.asarray(grid, dtype=float)
    ref = resolve_reference(prob, reference, grid)
    pred = predict(prob, nets, grid)
    return compare_trajectories(prob, pred, ref)


def compare_trajectories(prob, pred: ocp.Trajectories, ref: ocp.Trajectories) -> Evaluation:
    names = tuple(prob.x_names) + tuple(prob.u_names)
    P = np.concatenate([pred.x, pred.u], axis=1)
    R = np.concatenate([ref.x, ref.u], axis=1)
    abs_err, rle, mae = {}, {}, {}
    for j, name in enumerate(names):
        e = np.abs(P[:, j] - R[:, j])
        abs_err[name] = e
        rle[name] = _rel_l2(P[:, j], R[:, j])
        mae[name] = float(e.max())
    adj = {}
    if pred.p is not None and ref.p is not None:
        pp = pred.p.reshape(len(pred.t), -1)
        rp = ref.p.reshape(len(ref.t), -1)
        for j, name in enumerate(adjoint_names(prob)):
            adj[name] = _rel_l2(pp[:, j], rp[:, j])
    return Evaluation(pred.t, pred, ref, names, abs_err, rle, mae, adj)


def _rel_l2(y_pred, y_ref) -> float:
    den = float(np.linalg.norm(y_ref))
    num = float(np.linalg.norm(y_pred - y_ref))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


# --- engine ---------------------------------------------------------------------------

class _Engine:
    """Compiled loss, gradient and optimizer step for one problem and config."""

    def __init__(self, prob: ocp.OcProblem, cfg: TrainConfig, net_cfgs: dict, weights):
        self.prob = prob
        self.cfg = cfg
        self.net_cfgs = net_cfgs
        self.dtype = jnp.float64 if cfg.dtype == "float64" else jnp.float32
        self.keys = list(net_cfgs)
        self.sizes = [net_cfgs[k].n_params for k in self.keys]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        colloc = losses.CollocationSet.uniform(prob.t0, prob.tf, cfg.n_colloc)
        self.t_colloc = jnp.asarray(colloc.interior, dtype=self.dtype)
        self.t_bound = jnp.asarray([prob.t0, prob.tf], dtype=self.dtype)
        self.weights = None if weights is None else jnp.asarray(weights, dtype=self.dtype)
        self._chunks = {}
        self._components = jax.jit(self.components)

    def layers(self, theta):
        return {k: mlp.unflatten_jax(self.net_cfgs[k], theta[self.offsets[j]:self.offsets[j + 1]])
                for j, k in enumerate(self.keys)}

    def components(self, theta, t):
        prob, nc = self.prob, self.net_cfgs
        L = self.layers(theta)
        x, xd = mlp.batch_forward_dual(nc["x"], L["x"], t)
        u = mlp.batch_forward(nc["u"], L["u"], t)
        xb = mlp.batch_forward(nc["x"], L["x"], self.t_bound)
        if self.cfg.uses_adjoint:
            p, pd = mlp.batch_forward_dual(nc["p"], L["p"], t)
            pf = mlp.batch_forward(nc["p"], L["p"], self.t_bound[1:])[0]
            b = losses.el_components_batch(prob, t, x, xd, u, p, pd, xb[0], xb[1], pf,
                                           mean=jnp.mean)
        else:
            b = losses.pinn_components_batch(prob, t, x, xd, u, xb[0], xb[1], mean=jnp.mean)
        return jnp.stack([jnp.asarray(v, dtype=self.dtype) for v in b.values])

    def total(self, theta, s, t):
        lk = self.components(theta, t)
        if self.cfg.adaptive:
            return jnp.sum(jnp.exp(-s) * lk) + jnp.sum(s), lk
        return jnp.sum(self.weights * lk), lk

    def chunk(self, length: int):
        if length in self._chunks:
            return self._chunks[length]
        cfg, prob = self.cfg, self.prob
        grad = jax.value_and_grad(self.total, argnums=(0, 1), has_aux=True)
        n_colloc = cfg.n_colloc
        span = prob.tf - prob.t0

        def step(carry, _):
            theta, s, m1, v1, m2, v2, k, key = carry
            if cfg.resample:
                key, sub = jax.random.split(key)
                t = prob.t0 + span * jax.random.uniform(sub, (n_colloc,), self.dtype,
                                                        minval=1e-12, maxval=1.0)
            else:
                t = self.t_colloc
            (loss, lk), (g_theta, g_s) = grad(theta, s, t)
            k = k + 1
            d, m1, v1 = adam_update(m1, v1, k, g_theta, cfg.lr_params)
            theta = theta + d
            if cfg.adaptive:
                d, m2, v2 = adam_update(m2, v2, k, g_s, cfg.lr_s)
                s = s + d
            return (theta, s, m1, v1, m2, v2, k, key), (loss, lk)

        fn = jax.jit(lambda carry: jax.lax.scan(step, carry, None, length=length))
        self._chunks[length] = fn
        return fn

    def unpack(self, theta) -> dict:
        theta = np.asarray(theta, dtype=float)
        return {k: mlp.MlpParams.from_flat(self.net_cfgs[k], theta[self.offsets[j]:self.offsets[j + 1]])
                for j, k in enumerate(self.keys)}


def train(prob: ocp.OcProblem, config: TrainConfig,
          reference: ocp.Trajectories | None = None) -> RunResult:
    """Train the networks of ``config.variant`` on ``prob``.

    ``reference`` is required for problems without an analytic solution.
    A non-finite loss stops training; the result then carries
    ``status="aborted"`` and the last finite state.
    """
    cfg = config
    if not cfg.uses_adjoint and prob.penalties is None:
        raise losses.UnsupportedBaseline(
            f"no stable objective penalty L_J is registered for {prob.name}; "
            f"variant {cfg.variant!r} does not apply")
    grid = np.linspace(prob.t0, prob.tf, cfg.n_eval)
    ref = resolve_reference(prob, reference, grid)

    names = (losses.el_component_names(prob) if cfg.uses_adjoint
             else losses.pinn_component_names(prob))
    weights = None
    if not cfg.adaptive:
        weights = losses.FixedWeights.from_mapping(names, cfg.weights).values
    elif cfg.weights:
        raise ValueError("fixed weights given for an adaptive variant")

    # one stream, fixed order: x, u, p networks, then s
    rng = np.random.default_rng(cfg.seed)
    net_cfgs = network_configs(prob, cfg)
    nets = {k: mlp.init(c, rng) for k, c in net_cfgs.items()}
    s0 = losses.AdaptiveState.initial(len(names), rng).s if cfg.adaptive else np.zeros(len(names))

    eng = _Engine(prob, cfg, net_cfgs, weights)
    dt = eng.dtype
    theta = jnp.asarray(np.concatenate([nets[k].flat() for k in eng.keys]), dtype=dt)
    s = jnp.asarray(s0, dtype=dt)
    zeros_t = jnp.zeros_like(theta)
    zeros_s = jnp.zeros_like(s)
    carry = (theta, s, zeros_t, zeros_t, zeros_s, zeros_s,
             jnp.asarray(0.0, dtype=dt), jax.random.PRNGKey(cfg.seed))

    trace = MetricsTrace(names, tuple(prob.x_names) + tuple(prob.u_names))

    def record(it, carry):
        theta, s = carry[0], carry[1]
        lk = np.asarray(eng._components(theta, eng.t_colloc), dtype=float)
        w = np.exp(-np.asarray(s, dtype=float)) if cfg.adaptive else np.asarray(weights)
        loss = float(np.sum(w * lk) + (np.sum(np.asarray(s, dtype=float)) if cfg.adaptive else 0.0))
        ev = compare_trajectories(prob, predict(prob, eng.unpack(theta), grid), ref)
        rec = {"iteration": it, "loss": loss}
        rec.update({k: float(v) for k, v in zip(names, lk)})
        rec.update({weight_column(k): float(v) for k, v in zip(names, w)})
        rec.update({f"rle_{v}": ev.rle[v] for v in ev.variables})
        trace.append(rec)
        return ev, dict(zip(names, lk.tolist()))

    ev, comps = record(0, carry)
    status, abort = "ok", None
    done = 0
    while done < cfg.iterations:
        length = min(cfg.trace_interval, cfg.iterations - done)
        new_carry, (losses_k, lk) = eng.chunk(length)(carry)
        losses_k = np.asarray(losses_k)
        bad = ~np.isfinite(losses_k) | ~np.all(np.isfinite(np.asarray(lk)), axis=1)
        if bad.any():
            j = int(np.argmax(bad))
            abort = {"iteration": done + j + 1,
                     "components": dict(zip(names, np.asarray(lk)[j].tolist())),
                     "loss": float(losses_k[j])}
            status = "aborted"
            log.warning("%s/%s: %s", prob.name, cfg.variant, NonFiniteLoss(abort["iteration"],
                                                                            abort["components"]))
            break
        carry = new_carry
        done += length
        ev, comps = record(done, carry)

    final_nets = eng.unpack(carry[0])
    s_final = np.asarray(carry[1], dtype=float) if cfg.adaptive else None
    return RunResult(prob, cfg, final_nets, s_final, trace, ev, comps, status, abort)
