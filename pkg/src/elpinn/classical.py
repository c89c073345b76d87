"""Classical solvers: RK4, control-space descent methods and shooting.

Everything here works on a uniform time grid with fixed-step RK4.  States
and adjoints are stored as ``(len(grid), n)`` arrays; controls as
``(len(grid), m)``.  Inside an RK4 step the control (and, for the backward
adjoint sweep, the state) is needed at the step midpoint; it is
interpolated from the nodes with a four-point cubic by default, or
linearly with ``interp="linear"``.

The descent methods follow the continuous gradient ``dH/du`` of the
objective; the shooting solvers eliminate the control pointwise from
``dH/du = 0`` and solve the resulting boundary value problem in ``(x, p)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ocp
from ._jax import jax, jnp

__all__ = [
    "NonFiniteState",
    "Grid",
    "ControlTrajectory",
    "DescentResult",
    "ShootingConfig",
    "ShootingResult",
    "ReferenceResult",
    "rk4_step",
    "midpoints",
    "integrate_state",
    "integrate_adjoint",
    "objective",
    "control_gradient",
    "gradient_method",
    "conjugate_gradient_method",
    "eliminate_control",
    "multiple_shooting",
    "tpbvp_reference",
    "save_reference",
    "load_reference",
]


class NonFiniteState(FloatingPointError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class Grid:
    t0: float
    tf: float
    h: float = 1e-3

    def __post_init__(self):
        if not self.tf > self.t0 or not self.h > 0:
            raise ValueError("need tf > t0 and h > 0")
        steps = (self.tf - self.t0) / self.h
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"(tf - t0) / h = {steps} is not an integer")

    @classmethod
    def for_problem(cls, prob: ocp.OcProblem, h: float = 1e-3) -> "Grid":
        return cls(prob.t0, prob.tf, h)

    @property
    def steps(self) -> int:
        return int(round((self.tf - self.t0) / self.h))

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.tf, self.steps + 1)

    def __len__(self):
        return self.steps + 1


@dataclass
class ControlTrajectory:
    values: np.ndarray  # (len(grid), m), all players side by side

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("control values must be finite")

    @classmethod
    def zeros(cls, prob: ocp.OcProblem, grid: Grid) -> "ControlTrajectory":
        return cls(np.zeros((len(grid), prob.m)))

    @classmethod
    def from_function(cls, fn, grid: Grid) -> "ControlTrajectory":
        return cls(np.array([np.ravel(fn(t)) for t in grid.nodes], dtype=float))


# --- RK4 ----------------------------------------------------------------------

def rk4_step(deriv, t, y, h):
    """One classical RK4 step of ``y' = deriv(t, y)``."""
    y = np.asarray(y, dtype=float)
    k1 = np.asarray(deriv(t, y), dtype=float)
    k2 = np.asarray(deriv(t + 0.5 * h, y + 0.5 * h * k1), dtype=float)
    k3 = np.asarray(deriv(t + 0.5 * h, y + 0.5 * h * k2), dtype=float)
    k4 = np.asarray(deriv(t + h, y + h * k3), dtype=float)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise NonFiniteState(f"non-finite RK4 stage at t={t}", t)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_grid(grid: Grid, *arrays):
    for a in arrays:
        if len(a) != len(grid):
            raise ValueError(f"trajectory has {len(a)} nodes, grid has {len(grid)}")


def midpoints(values, interp: str = "cubic") -> np.ndarray:
    """Values at the step midpoints of node-valued ``values`` (first axis)."""
    v = np.asarray(values, dtype=float)
    if interp == "linear" or len(v) < 4:
        return 0.5 * (v[:-1] + v[1:])
    if interp != "cubic":
        raise ValueError(f"interp must be 'cubic' or 'linear', got {interp!r}")
    mid = np.empty((len(v) - 1,) + v.shape[1:])
    mid[1:-1] = (-v[:-3] + 9.0 * v[1:-2] + 9.0 * v[2:-1] - v[3:]) / 16.0
    mid[0] = (5.0 * v[0] + 15.0 * v[1] - 5.0 * v[2] + v[3]) / 16.0
    mid[-1] = (5.0 * v[-1] + 15.0 * v[-2] - 5.0 * v[-3] + v[-4]) / 16.0
    return mid


_COMPILED: dict = {}


def _compiled(prob, key, build):
    """Per-problem cache of jitted sweeps (kept alive with the problem)."""
    k = (id(prob), key)
    hit = _COMPILED.get(k)
    if hit is None or hit[0] is not prob:
        hit = _COMPILED[k] = (prob, build())
    return hit[1]


def _staged_sweep(deriv):
    """Jitted RK4 sweep where stage ``j`` of step ``k`` receives ``args_j[k]``."""

    def vec(values, like):
        return jnp.stack([jnp.broadcast_to(jnp.asarray(v, like.dtype), ()) for v in values])

    def run(y0, t, h, a_start, a_mid, a_end):
        def body(y, xs):
            tk, s0, sm, s1 = xs
            k1 = vec(deriv(tk, y, s0), y)
            k2 = vec(deriv(tk + 0.5 * h, y + 0.5 * h * k1, sm), y)
            k3 = vec(deriv(tk + 0.5 * h, y + 0.5 * h * k2, sm), y)
            k4 = vec(deriv(tk + h, y + h * k3, s1), y)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            return y, y

        _, ys = jax.lax.scan(body, y0, (t, a_start, a_mid, a_end))
        return jnp.concatenate([y0[None], ys])

    return jax.jit(run)


def _finite_or_raise(Y, times):
    bad = ~np.all(np.isfinite(Y), axis=1)
    if bad.any():
        tb = float(times[int(np.argmax(bad))])
        raise NonFiniteState(f"trajectory blew up at t={tb}", tb)
    return Y


def integrate_state(prob: ocp.OcProblem, u: ControlTrajectory, grid: Grid,
                    with_cost: bool = False, interp: str = "cubic"):
    """Forward RK4 of the dynamics from ``x0``.

    With ``with_cost`` the running costs are integrated alongside and the
    return value is ``(x, running_cost_per_player)``.
    """
    U = u.values
    _check_grid(grid, U)
    n, P = prob.n, prob.players
    t = grid.nodes

    def build():
        def deriv(tt, y, uu):
            x, uu = [y[k] for k in range(n)], [uu[j] for j in range(prob.m)]
            d = list(prob.f(tt, x, uu))
            if with_cost:
                d += [prob.L[i](tt, x, uu) for i in range(P)]
            return d

        return _staged_sweep(deriv)

    run = _compiled(prob, ("state", with_cost), build)
    y0 = np.concatenate([np.asarray(prob.x0, dtype=float), np.zeros(P if with_cost else 0)])
    Um = midpoints(U, interp)
    out = np.asarray(run(y0, t[:-1], grid.h, U[:-1], Um, U[1:]))
    # the row where a blow-up shows up belongs to the end of the failing step
    _finite_or_raise(out, t)
    if with_cost:
        return out[:, :n], out[-1, n:]
    return out


def integrate_adjoint(prob: ocp.OcProblem, i: int, x, u: ControlTrajectory,
                      grid: Grid, interp: str = "cubic") -> np.ndarray:
    """Backward RK4 of ``p_i' = -dH_i/dx`` from ``p_i(tf) = dPhi_i/dx``."""
    x = np.asarray(x, dtype=float)
    U = u.values
    _check_grid(grid, x, U)
    n, m = prob.n, prob.m
    t = grid.nodes

    def build():
        def deriv(tt, p, xu):
            xx, uu = [xu[k] for k in range(n)], [xu[n + j] for j in range(m)]
            return [-v for v in ocp.dH_dx(prob, i, tt, xx, uu, [p[k] for k in range(n)])]

        return _staged_sweep(deriv)

    run = _compiled(prob, ("adjoint", i), build)
    XU = np.concatenate([x, U], axis=1)
    mid = np.concatenate([midpoints(x, interp), midpoints(U, interp)], axis=1)
    p_f = np.array(ocp.terminal_adjoint(prob, i, list(x[-1])), dtype=float)
    # run in reversed time: step k goes from node N-k to N-k-1
    out = np.asarray(run(p_f, t[:0:-1], -grid.h, XU[:0:-1], mid[::-1], XU[-2::-1]))
    return _finite_or_raise(out, t[::-1])[::-1].copy()


def objective(prob: ocp.OcProblem, u: ControlTrajectory, grid: Grid, player: int = 0):
    """``J_i(u)``: running cost by RK4 quadrature plus terminal cost."""
    x, running = integrate_state(prob, u, grid, with_cost=True)
    return float(running[player] + prob.Phi[player](list(x[-1])))


def control_gradient(prob: ocp.OcProblem, x, p, u: ControlTrajectory, grid: Grid) -> np.ndarray:
    """``dH/du`` at every node (single player)."""
    t = grid.nodes
    g = ocp.dH_du(prob, 0, t, list(np.asarray(x).T), list(u.values.T), list(np.asarray(p).T))
    return _stack(g, t).T


# --- descent methods ------------------------------------------------------------

@dataclass
class DescentResult:
    control: ControlTrajectory
    x: np.ndarray
    p: np.ndarray
    J_trace: list[float]
    grad_norms: list[float]
    iterations: int
    status: str  # "converged", "max_iter", "line_search_failed"
    grid: Grid

    def trajectories(self) -> ocp.Trajectories:
        return ocp.Trajectories(self.grid.nodes, self.x, self.control.values, self.p[:, None, :])


def _inner(grid: Grid, a, b) -> float:
    """Trapezoidal L2 inner product of two node-valued fields."""
    w = np.full(len(grid), grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    return float(np.sum(w[:, None] * a * b))


def _single_player(prob, what):
    if prob.players != 1:
        raise ValueError(f"{what} needs a single-player problem; {prob.name} has "
                         f"{prob.players} players")


def _descent(prob, grid, max_iter, tol, u0, conjugate, armijo=1e-4, eta0=1.0, eta_min=1e-12,
             restart_every=None):
    _single_player(prob, "conjugate_gradient_method" if conjugate else "gradient_method")
    u = u0 if u0 is not None else ControlTrajectory.zeros(prob, grid)
    if restart_every is None:
        restart_every = max(1, len(grid) // 10)

    def state_of(u):
        x, running = integrate_state(prob, u, grid, with_cost=True)
        J = float(running[0] + prob.Phi[0](list(x[-1])))
        p = integrate_adjoint(prob, 0, x, u, grid)
        return x, p, J

    x, p, J = state_of(u)
    g = control_gradient(prob, x, p, u, grid)
    J_trace, norms = [J], [float(np.max(np.abs(g)))]
    d, gg_prev, since_restart = None, None, 0
    status, it = "max_iter", 0
    while it < max_iter:
        if norms[-1] <= tol:
            status = "converged"
            break
        gg = _inner(grid, g, g)
        if conjugate and d is not None and since_restart < restart_every:
            d = -g + (gg / gg_prev) * d
            since_restart += 1
        else:
            d, since_restart = -g, 0
        slope = _inner(grid, g, d)
        if slope >= 0:  # not a descent direction
            d, since_restart = -g, 0
            slope = -gg
        eta = eta0
        while True:
            try:
                trial = ControlTrajectory(u.values + eta * d)
                xt, pt, Jt = state_of(trial)
                ok = Jt <= J + armijo * eta * slope
            except (NonFiniteState, ValueError, FloatingPointError, OverflowError):
                ok = False
            if ok:
                break
            eta *= 0.5
            if eta < eta_min:
                break
        if eta < eta_min:
            status = "line_search_failed"
            break
        u, x, p, J = trial, xt, pt, Jt
        gg_prev = gg
        g = control_gradient(prob, x, p, u, grid)
        J_trace.append(J)
        norms.append(float(np.max(np.abs(g))))
        it += 1
    else:
        if norms[-1] <= tol:
            status = "converged"
    return DescentResult(u, x, p, J_trace, norms, it, status, grid)


def gradient_method(prob: ocp.OcProblem, grid: Grid | None = None, max_iter: int = 500,
                    tol: float = 1e-3, u0: ControlTrajectory | None = None) -> DescentResult:
    """Steepest descent on ``J`` with Armijo backtracking (halving from 1)."""
    grid = grid or Grid.for_problem(prob)
    return _descent(prob, grid, max_iter, tol, u0, conjugate=False)


def conjugate_gradient_method(prob: ocp.OcProblem, grid: Grid | None = None, max_iter: int = 500,
                              tol: float = 1e-3, u0: ControlTrajectory | None = None,
                              restart_every: int | None = None) -> DescentResult:
    """Fletcher-Reeves directions with the same line search.

    Restarts with steepest descent every ``len(grid) // 10`` iterations
    and whenever the direction fails to descend.
    """
    grid = grid or Grid.for_problem(prob)
    return _descent(prob, grid, max_iter, tol, u0, conjugate=True, restart_every=restart_every)


# --- control elimination and the (x, p) system ------------------------------------

def eliminate_control(prob: ocp.OcProblem, t, x, p, newton_iter: int = 50, tol: float = 1e-12):
    """Solve ``dH/du = 0`` for a single player's control.

    Uses the registered closed form when present, else Newton on ``dH/du``
    with a finite-difference Hessian.  Components may be arrays.
    """
    if prob.control_solve is not None:
        return list(prob.control_solve(t, x, p))
    u = [0.0 * x[0] for _ in range(prob.m)]
    for _ in range(newton_iter):
        g = np.array(ocp.dH_du(prob, 0, t, x, u, p), dtype=float)
        Hm = np.empty((prob.m, prob.m) + np.shape(g[0]))
        for j in range(prob.m):
            du = 1e-7 * (1.0 + np.abs(u[j]))
            up = list(u)
            up[j] = u[j] + du
            Hm[:, j] = (np.array(ocp.dH_du(prob, 0, t, x, up, p), dtype=float) - g) / du
        if prob.m == 1:
            step = [g[0] / Hm[0, 0]]
        else:
            step = list(np.linalg.solve(np.moveaxis(Hm, (0, 1), (-2, -1)),
                                        np.moveaxis(g, 0, -1)[..., None])[..., 0].T)
        u = [uj - sj for uj, sj in zip(u, step)]
        if np.max(np.abs(step)) < tol:
            break
    return u


def _stack(values, like):
    """Stack callback outputs, broadcasting constant entries to ``like``'s shape."""
    shape = np.shape(like)
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), shape) for v in values])


def _hamiltonian_system(prob):
    n = prob.n

    def deriv(t, y):
        x, p = list(y[:n]), list(y[n:])
        u = eliminate_control(prob, t, x, p)
        fx = prob.f(t, x, u)
        px = ocp.dH_dx(prob, 0, t, x, u, p)
        return _stack([*fx, *[-v for v in px]], y[0])

    return deriv


class _Flow:
    """Compiled RK4 flow of the Hamiltonian system over ``steps`` steps of ``h``.

    Needs a closed-form control solve; ``y`` has shape ``(2n, ...)`` and the
    trailing axes are carried along (finite-difference columns).
    """

    def __init__(self, prob, h, steps):
        n = prob.n

        def deriv(t, y):
            x, p = [y[k] for k in range(n)], [y[n + k] for k in range(n)]
            u = list(prob.control_solve(t, x, p))
            out = [*prob.f(t, x, u), *[-v for v in ocp.dH_dx(prob, 0, t, x, u, p)]]
            return jnp.stack([jnp.broadcast_to(jnp.asarray(v, y.dtype), y.shape[1:])
                              for v in out])

        def step(t, y):
            k1 = deriv(t, y)
            k2 = deriv(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = deriv(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = deriv(t + h, y + h * k3)
            return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        def final(t0, y):
            return jax.lax.fori_loop(0, steps, lambda k, y: step(t0 + k * h, y), y)

        def path(t0, y):
            def body(y, k):
                y = step(t0 + k * h, y)
                return y, y

            _, ys = jax.lax.scan(body, y, jnp.arange(steps))
            return jnp.concatenate([y[None], ys])

        self._final = jax.jit(final)
        self._segments = jax.jit(jax.vmap(final))
        self._path = jax.jit(path)

    @staticmethod
    def _checked(y, t0):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"trajectory from t={t0} blew up", t0)
        return y

    def final(self, t0, y):
        return self._checked(self._final(float(t0), jnp.asarray(y, dtype=float)), t0)

    def segments(self, t0s, Y):
        return self._checked(self._segments(jnp.asarray(t0s, dtype=float),
                                            jnp.asarray(Y, dtype=float)), t0s[0])

    def path(self, t0, y):
        return self._checked(self._path(float(t0), jnp.asarray(y, dtype=float)), t0)


class _PyFlow:
    """Plain-Python fallback of :class:`_Flow` (iterative control solve)."""

    def __init__(self, prob, h, steps):
        self.deriv, self.h, self.steps = _hamiltonian_system(prob), h, steps

    def final(self, t0, y):
        return _rk4_run(self.deriv, t0, np.asarray(y, dtype=float), self.h, self.steps)

    def segments(self, t0s, Y):
        return np.stack([self.final(t0, y) for t0, y in zip(t0s, Y)])

    def path(self, t0, y):
        return _rk4_run(self.deriv, t0, np.asarray(y, dtype=float), self.h, self.steps, keep=True)


def _flow(prob, h, steps):
    return (_Flow if prob.control_solve is not None else _PyFlow)(prob, h, steps)


def _rk4_run(deriv, t0, y, h, steps, keep=False):
    out = [y] if keep else None
    t = t0
    for k in range(steps):
        y = rk4_step(deriv, t, y, h)
        t = t0 + (k + 1) * h
        if keep:
            out.append(y)
    return np.array(out) if keep else y


def _newton(residual, z0, tol, budget, jac_columns):
    """Damped Newton with forward-difference Jacobian.

    ``jac_columns(z, r)`` returns ``(J, evals)``.  Returns
    ``(z, r_norm, status, iterations, evals, norm_history)``.
    """
    z = np.asarray(z0, dtype=float).copy()
    try:
        r = residual(z)
    except (NonFiniteState, FloatingPointError):
        return z, math.inf, "diverged", 0, 1, [math.inf]
    evals, it = 1, 0
    norm = float(np.linalg.norm(r))
    history = [norm]
    while norm > tol:
        if evals >= budget:
            return z, norm, "budget_exhausted", it, evals, history
        J, used = jac_columns(z, r)
        evals += used
        try:
            dz = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dz = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam, accepted = 1.0, False
        while lam >= 1e-10 and evals < budget:
            zt = z + lam * dz
            try:
                rt = residual(zt)
                nt = float(np.linalg.norm(rt))
            except (NonFiniteState, FloatingPointError):
                nt = math.inf
            evals += 1
            if nt < norm:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            status = "budget_exhausted" if evals >= budget else "stagnated"
            return z, norm, status, it, evals, history
        z, r, norm = zt, rt, nt
        history.append(norm)
        it += 1
    return z, norm, "converged", it, evals, history


def _fd_step(z):
    return math.sqrt(np.finfo(float).eps) * (1.0 + np.abs(z))


# --- multiple shooting -------------------------------------------------------------

@dataclass(frozen=True)
class ShootingConfig:
    segments: int = 20
    tol: float = 1e-6
    max_evals: int = 100_000
    initial_guess: np.ndarray | None = None  # flat unknowns; zeros by default

    def __post_init__(self):
        if self.segments < 1:
            raise ValueError("segments must be >= 1")


@dataclass
class ShootingResult:
    status: str
    trajectories: ocp.Trajectories | None
    residual_norm: float
    iterations: int
    evaluations: int
    unknowns: np.ndarray
    residual_history: list = field(default_factory=list)


def _segment_bounds(grid: Grid, segments: int):
    if grid.steps % segments:
        raise ValueError(f"{grid.steps} grid steps do not split into {segments} segments")
    per = grid.steps // segments
    return per, [grid.t0 + j * per * grid.h for j in range(segments)]


def multiple_shooting(prob: ocp.OcProblem, cfg: ShootingConfig | None = None,
                      grid: Grid | None = None) -> ShootingResult:
    """Multiple shooting on ``(x, p)`` with the control eliminated.

    Unknowns are ``(x, p)`` at the start of each segment.  Residuals are the
    initial state, the matching defects between segments and the terminal
    adjoint condition.
    """
    _single_player(prob, "multiple_shooting")
    cfg = cfg or ShootingConfig()
    grid = grid or Grid.for_problem(prob)
    n, S = prob.n, cfg.segments
    per, starts = _segment_bounds(grid, S)
    flow = _flow(prob, grid.h, per)
    x0 = np.asarray(prob.x0, dtype=float)
    size = 2 * n * S

    def ends(Z):
        # Z: (S, 2n[, cols]) -> segment end values of the same shape
        return flow.segments(starts, Z)

    def assemble(Z, E):
        r = [Z[0, :n] - x0[:, None] if Z.ndim == 3 else Z[0, :n] - x0]
        for j in range(S - 1):
            r.append(E[j] - Z[j + 1])
        xf, pf = E[-1, :n], E[-1, n:]
        r.append(pf - _stack(prob.dPhi_dx(0, list(xf)), pf[0]))
        return np.concatenate(r)

    def residual(z):
        Z = z.reshape(S, 2 * n)
        return assemble(Z, ends(Z))

    def jacobian(z, r):
        # perturb every unknown of every segment at once: column c of segment j
        # only moves segment j's end point
        Z = z.reshape(S, 2 * n)
        steps = _fd_step(Z)
        cols = np.repeat(Z[:, :, None], 2 * n + 1, axis=2)
        for c in range(2 * n):
            cols[:, c, c + 1] += steps[:, c]
        E = ends(cols)
        base_E = E[:, :, 0]
        J = np.zeros((size, size))
        for j in range(S):
            for c in range(2 * n):
                Zp = Z.copy()
                Zp[j, c] += steps[j, c]
                Ep = base_E.copy()
                Ep[j] = E[j, :, c + 1]
                J[:, j * 2 * n + c] = (assemble(Zp, Ep) - r) / steps[j, c]
        return J, size

    z0 = np.zeros(size) if cfg.initial_guess is None else np.asarray(cfg.initial_guess, float)
    if z0.shape != (size,):
        raise ValueError(f"initial guess must have {size} entries")
    z, norm, status, it, evals, hist = _newton(residual, z0, cfg.tol, cfg.max_evals, jacobian)

    traj = None
    try:
        Z = z.reshape(S, 2 * n)
        pieces = [flow.path(starts[j], Z[j]) for j in range(S)]
        Y = np.concatenate([pieces[0]] + [pc[1:] for pc in pieces[1:]])
        traj = _trajectories_from_xp(prob, grid.nodes, Y)
    except (NonFiniteState, FloatingPointError):
        status = "diverged" if status == "converged" else status
    return ShootingResult(status, traj, norm, it, evals, z, hist)


def _trajectories_from_xp(prob, t, Y):
    n = prob.n
    x, p = Y[:, :n], Y[:, n:]
    u = _stack(eliminate_control(prob, t, list(x.T), list(p.T)), t).T.copy()
    return ocp.Trajectories(np.asarray(t, float), x.copy(), u, p[:, None, :].copy())


# --- TPBVP reference -------------------------------------------------------------------

@dataclass
class ReferenceResult:
    status: str
    trajectories: ocp.Trajectories | None
    p0: np.ndarray
    terminal_defect: float
    iterations: int
    attempts: int


def tpbvp_reference(prob: ocp.OcProblem, fine_h: float = 1e-4, tol: float = 1e-8,
                    seed: int = 0, retries: int = 5, max_evals: int = 2000) -> ReferenceResult:
    """Single shooting on ``p(t0)`` for a dense reference solution.

    RK4 at step ``fine_h`` on the Hamiltonian system with the control
    eliminated.  Starts from ``p(t0) = 0``; on failure retries from
    ``retries`` uniform draws in ``[-1, 1]^n``.
    """
    _single_player(prob, "tpbvp_reference")
    grid = Grid(prob.t0, prob.tf, fine_h)
    n = prob.n
    flow = _flow(prob, grid.h, grid.steps)
    x0 = np.asarray(prob.x0, dtype=float)

    def defect(Y):
        xf, pf = Y[:n], Y[n:]
        return pf - _stack(prob.dPhi_dx(0, list(xf)), pf[0])

    def residual(p0):
        return defect(flow.final(grid.t0, np.concatenate([x0, p0])))

    def jacobian(p0, r):
        steps = _fd_step(p0)
        cols = np.repeat(np.concatenate([x0, p0])[:, None], n, axis=1)
        cols[n:][np.arange(n), np.arange(n)] += steps
        E = flow.final(grid.t0, cols)
        return (defect(E) - r[:, None]) / steps[None, :], n

    rng = np.random.default_rng(seed)
    guesses = [np.zeros(n)] + [rng.uniform(-1.0, 1.0, n) for _ in range(retries)]
    polish = tol * 1e-4
    best = None
    for attempt, g in enumerate(guesses, start=1):
        # polish well past tol so references at different fine_h agree to the
        # discretisation error, not to where Newton happened to stop
        z, norm, status, it, _, _ = _newton(residual, g, polish, max_evals, jacobian)
        if norm <= tol:
            status = "converged"
        if best is None or norm < best[1]:
            best = (z, norm, status, it, attempt)
        if status == "converged":
            break
    z, norm, status, it, attempt = best
    traj = None
    if math.isfinite(norm):
        Y = flow.path(grid.t0, np.concatenate([x0, z]))
        traj = _trajectories_from_xp(prob, grid.nodes, Y)
    return ReferenceResult(status, traj, z, norm, it, attempt)


# --- persistence ------------------------------------------------------------------------

def _adjoint_columns(prob):
    if prob.n == 1:
        return ["p"]
    return [f"p{k + 1}" for k in range(prob.n)]


def save_reference(path, prob: ocp.OcProblem, traj: ocp.Trajectories) -> None:
    """CSV with columns ``t``, states, adjoints, controls (17 significant digits)."""
    _single_player(prob, "save_reference")
    cols = ["t", *prob.x_names, *_adjoint_columns(prob), *prob.u_names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        P = traj.p.reshape(len(traj.t), -1)
        for k in range(len(traj.t)):
            row = [traj.t[k], *traj.x[k], *P[k], *traj.u[k]]
            w.writerow([f"{v:.17g}" for v in row])


def load_reference(path, prob: ocp.OcProblem) -> ocp.Trajectories:
    expected = ["t", *prob.x_names, *_adjoint_columns(prob), *prob.u_names]
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != expected:
        raise ValueError(f"{path}: columns {rows[0]} do not match {expected}")
    data = np.array(rows[1:], dtype=float)
    n, m = prob.n, prob.m
    return ocp.Trajectories(data[:, 0], data[:, 1:1 + n], data[:, 1 + 2 * n:1 + 2 * n + m],
                            data[:, 1 + n:1 + 2 * n][:, None, :])
