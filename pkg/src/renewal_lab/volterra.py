"""Time-marching solver for the renewal intensity equation and its Erlang ODE cascade.

The marching scheme discretises

    x_n = xi(t_n) + sum_j w_j h(t_n - t_j) lambda_j,      lambda_n = Phi(x_n)

with composite-trapezoid product weights w_j on a uniform grid.  When h(0) != 0
the step equation is implicit in lambda_n and solved by (damped) fixed-point
iteration.  Kernels declaring Erlang structure use an exact O(1)-per-step
convolution recursion; compactly supported kernels a sliding dot product; the
general path a full history dot product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .model import (
    ErlangForm,
    FiringFunction,
    FixedPointReport,
    MemoryKernel,
    SourceTerm,
    make_source_equilibrium,
    make_source_erlang_polynomial,
)

TRAPEZOID = "trapezoid"
LEFT_RECTANGLE = "left-rectangle"

#: lambda above this value is treated as numerically divergent
OVERFLOW_THRESHOLD = 1e12
#: tail slope (per unit time) above which a trajectory is flagged divergent
DIVERGENT_SLOPE = 1e-3


class NonConvergenceError(Exception):
    """The per-step implicit solve failed to converge."""

    def __init__(self, step: int, t: float, residual: float):
        super().__init__(f"inner iteration failed at step {step} (t={t:.6g}), residual {residual:.3e}")
        self.step = step
        self.t = t
        self.residual = residual


@dataclass(frozen=True)
class SolverConfig:
    """Marching-solver parameters."""

    t_end: float
    dt: float = 1e-3
    quadrature: str = TRAPEZOID
    inner_tol: float = 1e-12
    inner_max_iter: int = 50
    picard_mode: bool = False
    picard_tol: float = 1e-13
    picard_max_iter: int = 200

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.t_end < self.dt:
            raise ValueError("t_end must be >= dt")
        if self.quadrature not in (TRAPEZOID, LEFT_RECTANGLE):
            raise ValueError(f"unknown quadrature {self.quadrature!r}")
        if self.inner_tol <= 0 or self.picard_tol <= 0:
            raise ValueError("tolerances must be > 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def grid(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


@dataclass
class Trajectory:
    """Solution samples on a uniform grid; lambda_i = Phi(x_i) by construction."""

    ts: np.ndarray
    lam: np.ndarray
    x: np.ndarray
    divergent: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.ts[1] - self.ts[0]) if self.ts.size > 1 else 0.0

    @property
    def t_end(self) -> float:
        return float(self.ts[-1])

    def lam_at(self, t):
        return np.interp(t, self.ts, self.lam)

    def x_at(self, t):
        return np.interp(t, self.ts, self.x)

    def sup_lambda(self) -> float:
        return float(np.max(self.lam))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,lambda,x\n")
            for t, l, xv in zip(self.ts, self.lam, self.x):
                fh.write(f"{t:.17g},{l:.17g},{xv:.17g}\n")


def read_trajectory_csv(path) -> Trajectory:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if "t" not in header or "lambda" not in header:
            raise ValueError(f"{path}: expected columns t,lambda[,x], found {header}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    cols = {name: data[:, i] for i, name in enumerate(header)}
    x = cols.get("x", np.zeros_like(cols["t"]))
    return Trajectory(ts=cols["t"], lam=cols["lambda"], x=x)


# ---------------------------------------------------------------------------
# history accumulators
# ---------------------------------------------------------------------------


class _ErlangHistory:
    """Exact O(order^2)-per-step recursion for h = scale * alpha^{k+1} t^k e^{-alpha t}/k!."""

    def __init__(self, form: ErlangForm, cfg: SolverConfig, ts: np.ndarray, lam: np.ndarray):
        self.order = form.order
        self.alpha = form.alpha
        self.scale = form.scale
        self.dt = cfg.dt
        self.trapezoid = cfg.quadrature == TRAPEZOID
        self.lam = lam
        self.ts = ts
        k = self.order
        ad = form.alpha * cfg.dt
        decay = math.exp(-ad)
        self.coeffs = [[decay * ad ** (kk - i) / math.factorial(kk - i) for i in range(kk + 1)] for kk in range(k + 1)]
        self.T = [0.0] * (k + 1)
        self._decayed: Optional[list] = None
        self.h0 = self.scale * self.alpha if k == 0 else 0.0
        self._hcoeff = self.scale * form.alpha ** (k + 1) / math.factorial(k)
        self.beta = 0.5 * cfg.dt * self.h0 if self.trapezoid else 0.0

    def _h_at(self, t: float) -> float:
        return self._hcoeff * math.exp(-self.alpha * t) * t**self.order if t > 0 else self.h0

    def explicit_part(self, n: int):
        if n == 0:
            self._decayed = None
            return 0.0, 0.0
        dec = [sum(self.coeffs[k][i] * self.T[i] for i in range(k + 1)) for k in range(self.order + 1)]
        self._decayed = dec
        pre = self.scale * dec[self.order]
        if self.trapezoid:
            pre -= 0.5 * self.dt * self._h_at(self.ts[n]) * self.lam[0]
        return pre, self.beta

    def commit(self, n: int, lam_n: float) -> None:
        if n == 0:
            self.T = [0.0] * (self.order + 1)
        else:
            self.T = list(self._decayed)
        self.T[0] += self.dt * self.alpha * lam_n


class _DotHistory:
    """Direct product-quadrature history via dot products over past values."""

    def __init__(self, h: MemoryKernel, cfg: SolverConfig, ts: np.ndarray, lam: np.ndarray, window: Optional[int] = None):
        self.dt = cfg.dt
        self.trapezoid = cfg.quadrature == TRAPEZOID
        self.lam = lam
        self.hg = np.asarray(h.evaluator(ts), dtype=float)
        self.hrev = self.hg[::-1].copy()
        self.N = ts.size - 1
        self.window = window if window is not None else self.N + 1
        self.beta = 0.5 * cfg.dt * self.hg[0] if self.trapezoid else 0.0

    def explicit_part(self, n: int):
        if n == 0:
            return 0.0, 0.0
        j0 = max(1, n - self.window)
        acc = float(np.dot(self.lam[j0:n], self.hrev[self.N - n + j0 : self.N]))
        pre = self.dt * acc
        if n <= self.window:
            w0 = (0.5 * self.dt) if self.trapezoid else self.dt
            pre += w0 * self.hg[n] * self.lam[0]
        return pre, self.beta

    def commit(self, n: int, lam_n: float) -> None:
        self.lam[n] = lam_n


def _make_history(h: MemoryKernel, cfg: SolverConfig, ts: np.ndarray, lam: np.ndarray):
    if h.structure is not None:
        return _ErlangHistory(h.structure, cfg, ts, lam)
    if h.decay.kind == "compact":
        window = int(math.ceil(h.decay.horizon / cfg.dt)) + 1
        return _DotHistory(h, cfg, ts, lam, window=window)
    return _DotHistory(h, cfg, ts, lam)


def _scalar_phi(phi: FiringFunction) -> Callable:
    if phi.scalar_fn is not None:
        return phi.scalar_fn
    ev = phi.evaluator
    return lambda v: float(ev(v))


# ---------------------------------------------------------------------------
# the marching solver
# ---------------------------------------------------------------------------


def solve_nre(phi: FiringFunction, h: MemoryKernel, xi: SourceTerm, cfg: SolverConfig) -> Trajectory:
    """Solve lambda_t = Phi(xi_t + int_0^t h(t-s) lambda_s ds) on [0, t_end].

    Returns the unique locally bounded solution up to O(dt^2) discretisation
    error for the trapezoid rule.  If lambda exceeds the overflow threshold the
    partial trajectory is returned with the divergent flag set.
    """
    if cfg.picard_mode:
        return _solve_picard(phi, h, xi, cfg)

    ts = cfg.grid()
    n_pts = ts.size
    xi_vals = xi.on_grid(ts)
    if xi_vals.shape != ts.shape:
        raise ValueError("source term grid evaluation has wrong shape")
    lam = np.zeros(n_pts)
    xarr = np.zeros(n_pts)
    hist = _make_history(h, cfg, ts, lam)
    phi_s = _scalar_phi(phi)
    damped = abs(hist.beta) * phi.lip >= 1.0

    inner_total = 0
    inner_max = 0
    divergent = False
    cut = n_pts
    lam_prev = 0.0

    for n in range(n_pts):
        pre, beta = hist.explicit_part(n)
        base = xi_vals[n] + pre
        if beta == 0.0:
            xn = base
            ln = phi_s(xn)
        else:
            lam_c = lam_prev
            converged = False
            for it in range(cfg.inner_max_iter):
                nxt = phi_s(base + beta * lam_c)
                if abs(nxt - lam_c) <= cfg.inner_tol * max(1.0, abs(nxt)):
                    lam_c = nxt
                    converged = True
                    inner_total += it + 1
                    inner_max = max(inner_max, it + 1)
                    break
                lam_c = 0.5 * (lam_c + nxt) if damped else nxt
            if not converged:
                raise NonConvergenceError(n, float(ts[n]), abs(phi_s(base + beta * lam_c) - lam_c))
            xn = base + beta * lam_c
            ln = phi_s(xn)
        if not math.isfinite(ln) or ln > OVERFLOW_THRESHOLD or abs(xn) > OVERFLOW_THRESHOLD:
            divergent = True
            cut = n
            break
        lam[n] = ln
        xarr[n] = xn
        hist.commit(n, ln)
        lam_prev = ln

    meta = {
        "method": f"marching-{cfg.quadrature}",
        "dt": cfg.dt,
        "inner_tol": cfg.inner_tol,
        "inner_iterations_total": inner_total,
        "inner_iterations_max": inner_max,
        "history": type(hist).__name__.strip("_"),
        "phi": phi.label,
        "kernel": h.label,
        "source": xi.label,
    }
    if divergent:
        meta["divergent_at"] = float(ts[cut - 1]) if cut > 0 else 0.0
    return Trajectory(ts=ts[:cut], lam=lam[:cut], x=xarr[:cut], divergent=divergent, metadata=meta)


def _solve_picard(phi: FiringFunction, h: MemoryKernel, xi: SourceTerm, cfg: SolverConfig) -> Trajectory:
    """Global Picard iteration on the whole grid (cross-validation mode)."""
    ts = cfg.grid()
    n_pts = ts.size
    xi_vals = xi.on_grid(ts)
    hg = np.asarray(h.evaluator(ts), dtype=float)
    dt = cfg.dt

    def conv_sum(lam):
        conv = np.convolve(hg, lam)[:n_pts]
        if cfg.quadrature == TRAPEZOID:
            return dt * conv - 0.5 * dt * (hg * lam[0] + hg[0] * lam)
        return dt * conv - dt * hg[0] * lam

    lam = np.asarray(phi.evaluator(xi_vals), dtype=float)
    for it in range(cfg.picard_max_iter):
        new = np.asarray(phi.evaluator(xi_vals + conv_sum(lam)), dtype=float)
        delta = float(np.max(np.abs(new - lam)))
        lam = new
        if delta <= cfg.picard_tol:
            break
    else:
        raise NonConvergenceError(n_pts - 1, float(ts[-1]), delta)
    x = xi_vals + conv_sum(lam)
    lam = np.asarray(phi.evaluator(x), dtype=float)
    return Trajectory(
        ts=ts,
        lam=lam,
        x=x,
        metadata={"method": f"picard-{cfg.quadrature}", "dt": dt, "iterations": it + 1, "inner_tol": cfg.picard_tol},
    )


# ---------------------------------------------------------------------------
# grid-locked equilibrium source
# ---------------------------------------------------------------------------


def _even_mantissa(x: float) -> float:
    import struct

    bits = struct.unpack("<Q", struct.pack("<d", x))[0]
    if bits & 1:
        return math.nextafter(x, 0.0)
    return x


def equilibrium_locked_source(phi: FiringFunction, h: MemoryKernel, ell: float, cfg: SolverConfig) -> SourceTerm:
    """Equilibrium source evaluated through the solver's own quadrature.

    The analytic equilibrium source keeps the exact equation constant, but the
    marching scheme sees it only up to quadrature error, which near an unstable
    fixed point is amplified exponentially.  This constructor precomputes
    xi(t_n) so that the discrete step map reproduces the constant value
    Phi(kappa ell) bit-exactly: the discrete scheme then preserves its own
    equilibrium for any horizon.  Off the solver grid the analytic tail is used.
    """
    ts = cfg.grid()
    n_pts = ts.size
    lam = np.zeros(n_pts)
    hist = _make_history(h, cfg, ts, lam)
    phi_s = _scalar_phi(phi)

    # An even-mantissa target is reachable by round-to-nearest-even from every
    # summation lattice; an odd-mantissa one is skipped when the partial sums
    # land exactly on rounding ties.
    target_x = _even_mantissa(float(h.kappa) * float(ell))
    lam_star = phi_s(target_x)

    xi_vals = np.empty(n_pts)
    for n in range(n_pts):
        pre, beta = hist.explicit_part(n)
        w = beta * lam_star
        cand0 = (target_x - w) - pre
        # step at the rounding granularity of the dominant term so the search
        # sweep actually moves the rounded sums
        step = math.ulp(max(abs(target_x), abs(pre), abs(w), abs(cand0), 1e-300))
        cand = None
        for k in range(64):
            for sgn in (0,) if k == 0 else (1, -1):
                trial = cand0 + sgn * k * step
                if (trial + pre) + w == target_x:
                    cand = trial
                    break
            if cand is not None:
                break
        if cand is None:
            raise RuntimeError("failed to lock equilibrium source on the grid")
        xi_vals[n] = cand
        lam[n] = lam_star
        hist.commit(n, lam_star)

    analytic = make_source_equilibrium(h, ell)

    def grid_evaluator(req_ts):
        req_ts = np.asarray(req_ts, dtype=float)
        if req_ts.shape == ts.shape and np.array_equal(req_ts, ts):
            return xi_vals.copy()
        return analytic.on_grid(req_ts)

    return replace(
        analytic,
        grid_evaluator=grid_evaluator,
        label=f"locked-{analytic.label}",
    )


# ---------------------------------------------------------------------------
# Erlang cascade
# ---------------------------------------------------------------------------


def solve_erlang_cascade(
    phi: FiringFunction,
    n: int,
    alpha: float,
    c: Sequence[float],
    cfg: SolverConfig,
    keep_states: bool = False,
) -> Trajectory:
    """Integrate the autonomous ODE cascade equivalent to the Erlang-kernel equation.

    States x_0..x_n follow x_k' = -alpha(x_k - x_{k+1}) for k < n and
    x_n' = -alpha x_n + alpha Phi(x_0), from initial condition c; classical
    fourth-order Runge-Kutta at step dt.  The implied source term is the
    Erlang-polynomial source with coefficients c.
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    c = np.asarray(c, dtype=float)
    if c.size != n + 1:
        raise ValueError(f"need {n + 1} initial values, got {c.size}")
    ts = cfg.grid()
    phi_s = _scalar_phi(phi)
    a = alpha

    def deriv(state):
        out = np.empty_like(state)
        out[:-1] = a * (state[1:] - state[:-1])
        out[-1] = a * (phi_s(state[0]) - state[-1])
        return out

    n_pts = ts.size
    x0_path = np.empty(n_pts)
    states = np.empty((n_pts, n + 1)) if keep_states else None
    y = c.copy()
    dt = cfg.dt
    divergent = False
    cut = n_pts
    for i in range(n_pts):
        x0_path[i] = y[0]
        if states is not None:
            states[i] = y
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > OVERFLOW_THRESHOLD:
            divergent = True
            cut = i
            break
        if i == n_pts - 1:
            break
        k1 = deriv(y)
        k2 = deriv(y + 0.5 * dt * k1)
        k3 = deriv(y + 0.5 * dt * k2)
        k4 = deriv(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    x0_path = x0_path[:cut]
    lam = np.array([phi_s(v) for v in x0_path])
    meta = {
        "method": "erlang-cascade-rk4",
        "dt": dt,
        "order": n,
        "alpha": alpha,
        "initial": c.tolist(),
        "inner_tol": cfg.inner_tol,
    }
    traj = Trajectory(ts=ts[:cut], lam=lam, x=x0_path, divergent=divergent, metadata=meta)
    if keep_states:
        traj.metadata["states"] = states[:cut]
    return traj


def cascade_source(n: int, alpha: float, c: Sequence[float]) -> SourceTerm:
    """The source term implied by cascade initial condition c (Erlang polynomial)."""
    return make_source_erlang_polynomial(n, alpha, c)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

ALL_NONNEG = "all-nonneg"
ALL_NONPOS = "all-nonpos"
MIXED = "mixed"


@dataclass(frozen=True)
class RhoReport:
    """Sign profile of rho(t) = xi'(t) + h(t) Phi(xi(0)) on a grid."""

    grid: np.ndarray
    values: np.ndarray
    summary: str
    strict_delta: float  # length of the strict-sign window (0, delta); 0 if none


def compute_rho(h: MemoryKernel, xi: SourceTerm, phi: FiringFunction, grid) -> RhoReport:
    grid = np.asarray(grid, dtype=float)
    phi0 = float(phi(float(xi.evaluator(0.0))))
    values = np.asarray(xi.derivative(grid), dtype=float) + np.asarray(h.evaluator(grid), dtype=float) * phi0
    scale = max(1.0, float(np.max(np.abs(values))) if values.size else 1.0)
    tol = 1e-12 * scale
    if np.all(values >= -tol):
        summary = ALL_NONNEG
        sgn = 1.0
    elif np.all(values <= tol):
        summary = ALL_NONPOS
        sgn = -1.0
    else:
        return RhoReport(grid=grid, values=values, summary=MIXED, strict_delta=0.0)
    inner = np.where((grid > 0) & (sgn * values > tol))[0]
    delta = 0.0
    if inner.size:
        # longest strict run starting at the first positive grid point
        first_inner = np.where(grid > 0)[0][0]
        if inner[0] == first_inner:
            stop = inner[np.concatenate([np.diff(inner) > 1, [True]])][0]
            delta = float(grid[stop])
    return RhoReport(grid=grid, values=values, summary=summary, strict_delta=delta)


NON_DECREASING = "nondecreasing"
NON_INCREASING = "nonincreasing"


@dataclass(frozen=True)
class MonotoneReport:
    ok: bool
    first_violation: Optional[int]
    worst: float


def check_monotone(traj: Trajectory, direction: str, tol: float) -> MonotoneReport:
    """Check monotonicity of lambda along the grid within a -tol slack."""
    diffs = np.diff(traj.lam)
    if direction == NON_DECREASING:
        bad = diffs < -tol
        worst = float(-np.min(diffs)) if diffs.size else 0.0
    elif direction == NON_INCREASING:
        bad = diffs > tol
        worst = float(np.max(diffs)) if diffs.size else 0.0
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if np.any(bad):
        return MonotoneReport(ok=False, first_violation=int(np.argmax(bad)), worst=worst)
    return MonotoneReport(ok=True, first_violation=None, worst=worst)


@dataclass(frozen=True)
class ComparisonReport:
    dominated: bool
    max_violation: float
    at_index: Optional[int]


def compare_solutions(traj1: Trajectory, traj2: Trajectory, tol: float) -> ComparisonReport:
    """Pointwise dominance lambda_1 <= lambda_2 + tol on a common grid."""
    if traj1.ts.shape != traj2.ts.shape or not np.allclose(traj1.ts, traj2.ts):
        raise ValueError("trajectories must share the same grid")
    gap = traj1.lam - traj2.lam
    worst = float(np.max(gap))
    if worst > tol:
        return ComparisonReport(dominated=False, max_violation=worst, at_index=int(np.argmax(gap)))
    return ComparisonReport(dominated=True, max_violation=max(worst, 0.0), at_index=None)


CONVERGED = "converged"
DIVERGENT = "divergent"
UNDECIDED = "undecided"


@dataclass(frozen=True)
class LimitDiagnostic:
    kind: str
    ell: Optional[float] = None
    residual: Optional[float] = None
    tail_oscillation: float = math.nan
    tail_slope: float = math.nan


def limit_diagnostic(
    traj: Trajectory,
    reports: Sequence[FixedPointReport],
    window: float,
    osc_tol: float = 1e-4,
    dist_tol: float = 1e-2,
) -> LimitDiagnostic:
    """Classify the tail of a trajectory against known fixed points.

    Converged verdicts need tail oscillation below osc_tol and distance to a
    fixed point below dist_tol; divergence needs the overflow flag or a
    persistently rising tail above every fixed point.  Anything else stays
    undecided.
    """
    if traj.divergent:
        return LimitDiagnostic(kind=DIVERGENT)
    if window >= traj.t_end:
        raise ValueError("window must be smaller than the trajectory horizon")
    mask = traj.ts >= traj.t_end - window
    tail = traj.lam[mask]
    tts = traj.ts[mask]
    osc = float(np.max(tail) - np.min(tail))
    mean = float(np.mean(tail))
    slope = float(np.polyfit(tts, tail, 1)[0]) if tail.size > 2 else math.nan
    ells = np.array([r.ell for r in reports]) if reports else np.array([])
    if ells.size and osc < osc_tol:
        idx = int(np.argmin(np.abs(ells - mean)))
        if abs(ells[idx] - mean) < dist_tol:
            return LimitDiagnostic(
                kind=CONVERGED, ell=float(ells[idx]), residual=abs(ells[idx] - mean), tail_oscillation=osc, tail_slope=slope
            )
    above_all = not ells.size or mean > float(np.max(ells)) + dist_tol
    if slope > DIVERGENT_SLOPE and above_all:
        return LimitDiagnostic(kind=DIVERGENT, tail_oscillation=osc, tail_slope=slope)
    return LimitDiagnostic(kind=UNDECIDED, tail_oscillation=osc, tail_slope=slope)


def entry_time(traj: Trajectory, ell: float, eps0: float) -> float:
    """Last entry time into the eps0-ball around ell that is never exited afterwards."""
    outside = np.abs(traj.lam - ell) >= eps0
    idx = np.where(outside)[0]
    if idx.size == 0:
        return 0.0
    last = idx[-1]
    if last + 1 >= traj.ts.size:
        return math.inf
    return float(traj.ts[last + 1])
