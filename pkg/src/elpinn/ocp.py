"""Unconstrained optimal control problems and open-loop Nash games.

States, controls and adjoints are passed to every callback as plain
sequences of scalars (one entry per component).  A "scalar" can be a float,
a numpy/JAX array holding one value per collocation point, a
:class:`~elpinn.scalar_algebra.TapeVar` or a
:class:`~elpinn.scalar_algebra.DualNode`, so the same problem definition
drives the tape oracle, the batched training loss and the classical solvers.

Controls are passed flat: ``u_all`` concatenates every player's control
vector in player order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import scalar_algebra as sa

__all__ = [
    "OcProblem",
    "AnalyticSolution",
    "Trajectories",
    "PenaltyTerm",
    "ExperimentDefaults",
    "NoAnalyticSolution",
    "ValidationReport",
    "hamiltonian",
    "dH_dx",
    "dH_du",
    "terminal_adjoint",
    "control_slice",
    "validate_partials",
    "analytic_eval",
    "el_residuals",
    "analytic_residuals",
    "REGISTRY",
    "get_problem",
]


class NoAnalyticSolution(LookupError):
    """The problem has no closed-form solution; use the TPBVP reference."""


@dataclass(frozen=True)
class AnalyticSolution:
    x: Callable  # t -> [x_1..x_n]
    u: Callable  # t -> u_all
    p: Callable | None = None  # t -> [[p_i1..p_in] per player]


@dataclass
class Trajectories:
    """Sampled solution: ``x (N, n)``, ``u (N, m)``, ``p (N, P, n)`` or None."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    p: np.ndarray | None = None

    def at(self, grid) -> "Trajectories":
        """Linear interpolation onto ``grid`` (identity if the grids match)."""
        grid = np.asarray(grid, dtype=float)
        if grid.shape == self.t.shape and np.array_equal(grid, self.t):
            return self

        def interp(a):
            flat = a.reshape(a.shape[0], -1)
            cols = [np.interp(grid, self.t, flat[:, j]) for j in range(flat.shape[1])]
            return np.stack(cols, axis=1).reshape((grid.size,) + a.shape[1:])

        return Trajectories(grid, interp(self.x), interp(self.u),
                            None if self.p is None else interp(self.p))


@dataclass(frozen=True)
class PenaltyTerm:
    """Objective penalty ``L_J`` for one player.

    ``L_J = g(mean_j integrand(t_j, x_j, u_j) + terminal(x(tf)))`` where
    ``g`` squares its argument when ``square`` is set.
    """

    integrand: Callable | None
    terminal: Callable | None = None
    square: bool = False


@dataclass(frozen=True)
class ExperimentDefaults:
    iterations: int
    lr_params: float = 1e-4
    lr_s: float = 1e-3
    el_weights: dict = field(default_factory=dict)  # component name -> weight, default 1
    pinn_weights: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OcProblem:
    name: str
    n: int
    control_dims: tuple[int, ...]
    t0: float
    tf: float
    x0: tuple[float, ...]
    f: Callable  # (t, x, u_all) -> [n]
    L: tuple[Callable, ...]  # per player, (t, x, u_all) -> scalar
    Phi: tuple[Callable, ...]  # per player, (x) -> scalar
    df_dx: Callable  # (t, x, u_all) -> n x n, entry [k][j] = d f_k / d x_j
    df_du: Callable  # (i, t, x, u_all) -> n x m_i
    dL_dx: Callable  # (i, t, x, u_all) -> [n]
    dL_du: Callable  # (i, t, x, u_all) -> [m_i], w.r.t. player i's own control
    dPhi_dx: Callable  # (i, x) -> [n]
    analytic: AnalyticSolution | None = None
    # single player: (t, x, p) -> u solving dH/du = 0 in closed form
    control_solve: Callable | None = None
    penalties: tuple[PenaltyTerm, ...] | None = None
    defaults: ExperimentDefaults | None = None
    description: str = ""
    state_names: tuple[str, ...] | None = None
    control_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.tf > self.t0:
            raise ValueError("tf must exceed t0")
        if len(self.x0) != self.n:
            raise ValueError("x0 length must equal state dimension")
        P = len(self.control_dims)
        if P < 1 or len(self.L) != P or len(self.Phi) != P:
            raise ValueError("need one running and terminal cost per player")
        if self.penalties is not None and len(self.penalties) != P:
            raise ValueError("need one penalty term per player")

    @property
    def players(self) -> int:
        return len(self.control_dims)

    @property
    def m(self) -> int:
        return sum(self.control_dims)

    @property
    def x_names(self) -> tuple[str, ...]:
        if self.state_names:
            return self.state_names
        return ("x",) if self.n == 1 else tuple(f"x{k + 1}" for k in range(self.n))

    @property
    def u_names(self) -> tuple[str, ...]:
        if self.control_names:
            return self.control_names
        return ("u",) if self.m == 1 else tuple(f"u{k + 1}" for k in range(self.m))


def control_slice(prob: OcProblem, i: int) -> slice:
    start = sum(prob.control_dims[:i])
    return slice(start, start + prob.control_dims[i])


def _check(prob: OcProblem, i: int, x, u_all, p_i=None):
    if not 0 <= i < prob.players:
        raise ValueError(f"player index {i} out of range")
    if len(x) != prob.n or len(u_all) != prob.m:
        raise ValueError(f"expected x of length {prob.n} and u of length {prob.m}, "
                         f"got {len(x)} and {len(u_all)}")
    if p_i is not None and len(p_i) != prob.n:
        raise ValueError(f"adjoint must have length {prob.n}, got {len(p_i)}")


def hamiltonian(prob: OcProblem, i: int, t, x, u_all, p_i):
    """``L_i + p_i . f``."""
    _check(prob, i, x, u_all, p_i)
    fx = prob.f(t, x, u_all)
    return prob.L[i](t, x, u_all) + sa.tree_sum([pk * fk for pk, fk in zip(p_i, fx)])


def dH_dx(prob: OcProblem, i: int, t, x, u_all, p_i) -> list:
    _check(prob, i, x, u_all, p_i)
    J = prob.df_dx(t, x, u_all)
    dl = prob.dL_dx(i, t, x, u_all)
    return [dl[j] + sa.tree_sum([J[k][j] * p_i[k] for k in range(prob.n)])
            for j in range(prob.n)]


def dH_du(prob: OcProblem, i: int, t, x, u_all, p_i) -> list:
    _check(prob, i, x, u_all, p_i)
    B = prob.df_du(i, t, x, u_all)
    dl = prob.dL_du(i, t, x, u_all)
    return [dl[j] + sa.tree_sum([B[k][j] * p_i[k] for k in range(prob.n)])
            for j in range(prob.control_dims[i])]


def terminal_adjoint(prob: OcProblem, i: int, x_f) -> list:
    return list(prob.dPhi_dx(i, x_f))


def el_residuals(prob: OcProblem, t, x, xdot, u_all, p, pdot) -> dict:
    """Pointwise Euler-Lagrange residuals.

    ``p`` and ``pdot`` are per-player lists of adjoint vectors.  Returns
    ``{"x": [...], "p": [[...] per player], "u": [[...] per player]}``.
    """
    fx = prob.f(t, x, u_all)
    rx = [xd - fk for xd, fk in zip(xdot, fx)]
    rp, ru = [], []
    for i in range(prob.players):
        g = dH_dx(prob, i, t, x, u_all, p[i])
        rp.append([pd + gk for pd, gk in zip(pdot[i], g)])
        ru.append(dH_du(prob, i, t, x, u_all, p[i]))
    return {"x": rx, "p": rp, "u": ru}


def boundary_residuals(prob: OcProblem, x_t0, p_tf, x_tf) -> dict:
    r0 = [a - b for a, b in zip(x_t0, prob.x0)]
    rf = []
    for i in range(prob.players):
        target = terminal_adjoint(prob, i, x_tf)
        rf.append([a - b for a, b in zip(p_tf[i], target)])
    return {"x0": r0, "pf": rf}


# --- validation ------------------------------------------------------------------

@dataclass
class ValidationReport:
    passed: bool
    max_deviation: float
    failures: list = field(default_factory=list)  # (callback, player, point, analytic, fd)

    def __bool__(self):
        return self.passed


def _fd(fn, point, k, h=1e-6):
    hi = list(point)
    lo = list(point)
    hi[k] += h
    lo[k] -= h
    return (np.asarray(fn(hi), dtype=float) - np.asarray(fn(lo), dtype=float)) / (2 * h)


def validate_partials(prob: OcProblem, trials: int = 100, seed: int = 0,
                      rtol: float = 1e-6, atol: float = 1e-8) -> ValidationReport:
    """Compare hand-coded partials with central differences at random points."""
    rng = np.random.default_rng(seed)
    n, m = prob.n, prob.m
    worst = 0.0
    failures = []

    def record(name, i, point, analytic, fd):
        nonlocal worst
        a = np.asarray(analytic, dtype=float)
        b = np.asarray(fd, dtype=float)
        dev = np.abs(a - b)
        worst = max(worst, float(dev.max(initial=0.0)))
        if np.any(dev > rtol * np.maximum(np.abs(a), np.abs(b)) + atol):
            failures.append((name, i, point, a, b))

    for _ in range(trials):
        t = float(rng.uniform(prob.t0, prob.tf))
        x = list(rng.uniform(-2.0, 2.0, n))
        u = list(rng.uniform(-2.0, 2.0, m))
        point = (t, tuple(x), tuple(u))
        J = np.array(prob.df_dx(t, x, u), dtype=float).reshape(n, n)
        fd = np.stack([_fd(lambda xx: prob.f(t, xx, u), x, j) for j in range(n)], axis=1)
        record("df_dx", None, point, J, fd)
        for i in range(prob.players):
            sl = control_slice(prob, i)
            cols = range(sl.start, sl.stop)
            B = np.array(prob.df_du(i, t, x, u), dtype=float).reshape(n, len(cols))
            fd = np.stack([_fd(lambda uu: prob.f(t, x, uu), u, j) for j in cols], axis=1)
            record("df_du", i, point, B, fd)
            dl = np.array(prob.dL_dx(i, t, x, u), dtype=float)
            fd = np.array([_fd(lambda xx: [prob.L[i](t, xx, u)], x, j)[0] for j in range(n)])
            record("dL_dx", i, point, dl, fd)
            dl = np.array(prob.dL_du(i, t, x, u), dtype=float)
            fd = np.array([_fd(lambda uu: [prob.L[i](t, x, uu)], u, j)[0] for j in cols])
            record("dL_du", i, point, dl, fd)
            dp = np.array(prob.dPhi_dx(i, x), dtype=float)
            fd = np.array([_fd(lambda xx: [prob.Phi[i](xx)], x, j)[0] for j in range(n)])
            record("dPhi_dx", i, point, dp, fd)
    return ValidationReport(not failures, worst, failures)


# --- analytic solutions --------------------------------------------------------

def analytic_eval(prob: OcProblem, grid) -> Trajectories:
    """Sample the closed-form solution on ``grid``."""
    if prob.analytic is None:
        raise NoAnalyticSolution(f"{prob.name} has no analytic solution; "
                                 "use classical.tpbvp_reference")
    t = np.asarray(grid, dtype=float)
    sol = prob.analytic
    x = np.stack([np.broadcast_to(c, t.shape) for c in sol.x(t)], axis=1)
    u = np.stack([np.broadcast_to(c, t.shape) for c in sol.u(t)], axis=1)
    p = None
    if sol.p is not None:
        p = np.stack([np.stack([np.broadcast_to(c, t.shape) for c in pi], axis=1)
                      for pi in sol.p(t)], axis=1)
    return Trajectories(t, x, u, p)


def analytic_residuals(prob: OcProblem, grid) -> dict:
    """Sup-norm of every Euler-Lagrange residual along the analytic triple.

    Time derivatives come from forward-mode dual numbers, not differences.
    """
    sol = prob.analytic
    if sol is None or sol.p is None:
        raise NoAnalyticSolution(f"{prob.name} has no analytic state/control/adjoint triple")
    wx = {"x": 0.0, "p": 0.0, "u": 0.0}
    for t in np.asarray(grid, dtype=float):
        td = sa.DualNode(float(t), 1.0)
        xd = sol.x(td)
        pd = sol.p(td)
        x = [sa.value_of(c) for c in xd]
        xdot = [c.tangent if isinstance(c, sa.DualNode) else 0.0 for c in xd]
        u = [sa.value_of(c) for c in sol.u(float(t))]
        p = [[sa.value_of(c) for c in pi] for pi in pd]
        pdot = [[c.tangent if isinstance(c, sa.DualNode) else 0.0 for c in pi] for pi in pd]
        r = el_residuals(prob, float(t), x, xdot, u, p, pdot)
        wx["x"] = max(wx["x"], max(abs(v) for v in r["x"]))
        wx["p"] = max(wx["p"], max(abs(v) for pi in r["p"] for v in pi))
        wx["u"] = max(wx["u"], max(abs(v) for ui in r["u"] for v in ui))
    x0 = [float(c) for c in sol.x(float(prob.t0))]
    xf = [float(c) for c in sol.x(float(prob.tf))]
    pf = [[float(c) for c in pi] for pi in sol.p(float(prob.tf))]
    b = boundary_residuals(prob, x0, pf, xf)
    wx["x0"] = max(abs(v) for v in b["x0"])
    wx["pf"] = max(abs(v) for pi in b["pf"] for v in pi)
    return wx


# --- the six benchmark problems -------------------------------------------------

def _ex1() -> OcProblem:
    def f(t, x, u):
        return [0.5 * x[0] + u[0]]

    def L(t, x, u):
        return 0.25 * (1.25 * x[0] * x[0] + x[0] * u[0] + u[0] * u[0])

    def xs(t):
        return [sa.cosh(1.0 - t) / math.cosh(1.0)]

    def us(t):
        x = xs(t)[0]
        return [-x * (sa.tanh(1.0 - t) + 0.5)]

    def ps(t):
        # stationarity 0.25 (x + 2u) + p = 0 along (x*, u*)
        return [[0.5 * xs(t)[0] * sa.tanh(1.0 - t)]]

    return OcProblem(
        name="ex1", n=1, control_dims=(1,), t0=0.0, tf=1.0, x0=(1.0,),
        f=f, L=(L,), Phi=(lambda x: 0.0,),
        df_dx=lambda t, x, u: [[0.5]],
        df_du=lambda i, t, x, u: [[1.0]],
        dL_dx=lambda i, t, x, u: [0.25 * (2.5 * x[0] + u[0])],
        dL_du=lambda i, t, x, u: [0.25 * (x[0] + 2.0 * u[0])],
        dPhi_dx=lambda i, x: [0.0],
        analytic=AnalyticSolution(xs, us, ps),
        control_solve=lambda t, x, p: [-2.0 * p[0] - 0.5 * x[0]],
        penalties=(PenaltyTerm(L, None, square=True),),
        defaults=ExperimentDefaults(30000, pinn_weights={"L_J": 0.05}),
        description="scalar LQ problem on [0, 1]",
    )


def _ex2(omega_assignment: str = "control") -> OcProblem:
    def f(t, x, u):
        return [2.0 * x[0] + u[0] + u[1]]

    L1 = lambda t, x, u: x[0] * x[0] + u[0] * u[0]  # noqa: E731
    L2 = lambda t, x, u: 4.0 * x[0] * x[0] + u[1] * u[1]  # noqa: E731

    def xs(t):
        return [sa.exp(-3.0 * t)]

    def us(t):
        a = sa.exp(-3.0 * t)
        b = sa.exp(-(2.0 * t + 3.0))
        return [-a + b, -4.0 * a - b]

    def ps(t):
        u1, u2 = us(t)
        return [[-2.0 * u1], [-2.0 * u2]]

    if omega_assignment == "control":
        el = {"L_u1": 11.1, "L_u2": 10.1}
    elif omega_assignment == "terminal":
        el = {"L_pf1": 11.1, "L_pf2": 10.1}
    else:
        raise ValueError("omega_assignment must be 'control' or 'terminal'")

    return OcProblem(
        name="ex2", n=1, control_dims=(1, 1), t0=0.0, tf=3.0, x0=(1.0,),
        f=f, L=(L1, L2), Phi=(lambda x: 0.0, lambda x: 5.0 * x[0] * x[0]),
        df_dx=lambda t, x, u: [[2.0]],
        df_du=lambda i, t, x, u: [[1.0]],
        dL_dx=lambda i, t, x, u: [2.0 * x[0]] if i == 0 else [8.0 * x[0]],
        dL_du=lambda i, t, x, u: [2.0 * u[i]],
        dPhi_dx=lambda i, x: [0.0] if i == 0 else [10.0 * x[0]],
        analytic=AnalyticSolution(xs, us, ps),
        # the printed x(3[j]) term is read as x at tf, unsquared as printed
        penalties=(PenaltyTerm(L1, None, square=True),
                   PenaltyTerm(L2, lambda x: 5.0 * x[0], square=True)),
        defaults=ExperimentDefaults(60000, el_weights=el,
                                    pinn_weights={"L_J1": 1.0, "L_J2": 1.0}),
        description="two-player LQ open-loop Nash game on [0, 3]",
    )


def _ex3() -> OcProblem:
    def f(t, x, u):
        return [-x[0] + u[0] * x[0] - u[0] * u[0]]

    def xs(t):
        return [4.0 / (1.0 + 3.0 * sa.exp(t))]

    def us(t):
        return [2.0 / (1.0 + 3.0 * sa.exp(t))]

    c = -math.exp(5.0) / (1.0 + 3.0 * math.exp(5.0)) ** 2

    def ps(t):
        # p' = p (1 - u) with p(5) = -1
        q = 1.0 + 3.0 * sa.exp(t)
        return [[c * q * q * sa.exp(-t)]]

    return OcProblem(
        name="ex3", n=1, control_dims=(1,), t0=0.0, tf=5.0, x0=(1.0,),
        f=f, L=(lambda t, x, u: 0.0,), Phi=(lambda x: -x[0],),
        df_dx=lambda t, x, u: [[-1.0 + u[0]]],
        df_du=lambda i, t, x, u: [[x[0] - 2.0 * u[0]]],
        dL_dx=lambda i, t, x, u: [0.0],
        dL_du=lambda i, t, x, u: [0.0],
        dPhi_dx=lambda i, x: [-1.0],
        analytic=AnalyticSolution(xs, us, ps),
        control_solve=lambda t, x, p: [0.5 * x[0]],
        penalties=None,
        defaults=ExperimentDefaults(20000, el_weights={"L_pf": 25.0}),
        description="scalar nonlinear problem maximizing x(5)",
    )


def _ex4() -> OcProblem:
    def f(t, x, u):
        return [u[0], 0.5 * u[0] * u[0] + u[0] * x[0] + u[0] + x[0]]

    def xs(t):
        return [0.5 * t * t - 1.5 * t + 0.5,
                t * t * t * t / 8.0 - 5.0 / 12.0 * t * t * t + 0.375 * t * t - 0.625 * t]

    def us(t):
        return [t - 1.5]

    def ps(t):
        return [[-0.5 * t * t + 0.5 * t, 1.0 + 0.0 * t]]

    return OcProblem(
        name="ex4", n=2, control_dims=(1,), t0=0.0, tf=1.0, x0=(0.5, 0.0),
        f=f, L=(lambda t, x, u: 0.0,), Phi=(lambda x: x[1],),
        df_dx=lambda t, x, u: [[0.0, 0.0], [u[0] + 1.0, 0.0]],
        df_du=lambda i, t, x, u: [[1.0], [u[0] + x[0] + 1.0]],
        dL_dx=lambda i, t, x, u: [0.0, 0.0],
        dL_du=lambda i, t, x, u: [0.0],
        dPhi_dx=lambda i, x: [0.0, 1.0],
        analytic=AnalyticSolution(xs, us, ps),
        control_solve=lambda t, x, p: [-p[0] / p[1] - x[0] - 1.0],
        penalties=(PenaltyTerm(None, lambda x: x[1], square=False),),
        defaults=ExperimentDefaults(20000, pinn_weights={"L_r2": 150.0}),
        description="two-state nonlinear problem minimizing x2(1)",
    )


def _ex5() -> OcProblem:
    k, c, mass = 2.0, 0.005, 1.0

    def f(t, x, u):
        return [x[1], -k / mass * x[0] - c / mass * x[1] * x[1] * x[1] + u[0] / mass]

    return OcProblem(
        name="ex5", n=2, control_dims=(1,), t0=0.0, tf=3.0, x0=(1.0, -0.8),
        f=f, L=(lambda t, x, u: 0.5 * u[0] * u[0],),
        Phi=(lambda x: 25.0 * x[0] * x[0] + 25.0 * x[1] * x[1],),
        df_dx=lambda t, x, u: [[0.0, 1.0], [-k / mass, -3.0 * c / mass * x[1] * x[1]]],
        df_du=lambda i, t, x, u: [[0.0], [1.0 / mass]],
        dL_dx=lambda i, t, x, u: [0.0, 0.0],
        dL_du=lambda i, t, x, u: [u[0]],
        dPhi_dx=lambda i, x: [50.0 * x[0], 50.0 * x[1]],
        control_solve=lambda t, x, p: [-p[1] / mass],
        defaults=ExperimentDefaults(100000, lr_s=1e-4),
        description="cubic-damped oscillator, minimum energy with terminal penalty",
        state_names=("x", "v"),
    )


def _ex6() -> OcProblem:
    c0, k, eps = 0.01, -0.005, 1e-6

    def f(t, x, u):
        return [x[1], u[0] - c0 * sa.exp(-k * x[0]) * x[1] * sa.sqrt(x[1] * x[1] + eps * eps)]

    def df_dx(t, x, u):
        e = sa.exp(-k * x[0])
        r = sa.sqrt(x[1] * x[1] + eps * eps)
        return [[0.0, 1.0],
                [c0 * k * e * x[1] * r, -c0 * e * (r + x[1] * x[1] / r)]]

    return OcProblem(
        name="ex6", n=2, control_dims=(1,), t0=0.0, tf=5.0, x0=(2.0, -0.8),
        f=f, L=(lambda t, x, u: 0.5 * u[0] * u[0],),
        Phi=(lambda x: 25.0 * x[0] * x[0] + 25.0 * x[1] * x[1],),
        df_dx=df_dx,
        df_du=lambda i, t, x, u: [[0.0], [1.0]],
        dL_dx=lambda i, t, x, u: [0.0, 0.0],
        dL_du=lambda i, t, x, u: [u[0]],
        dPhi_dx=lambda i, x: [50.0 * x[0], 50.0 * x[1]],
        control_solve=lambda t, x, p: [-p[1]],
        defaults=ExperimentDefaults(30000),
        description="cart with position-dependent regularized quadratic friction",
        state_names=("x", "v"),
    )


REGISTRY: dict[str, Callable[[], OcProblem]] = {
    "ex1": _ex1,
    "ex2": _ex2,
    "ex3": _ex3,
    "ex4": _ex4,
    "ex5": _ex5,
    "ex6": _ex6,
}


def get_problem(name: str, **options) -> OcProblem:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(REGISTRY)}") from None
    return factory(**options)
