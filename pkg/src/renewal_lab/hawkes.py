"""Mean-field Hawkes particle system, its coupled Poisson limit, and the
statistical experiments around the estimator Z_t / t.

Simulation is exact thinning: per-particle candidate streams are generated
from counter-based Philox generators keyed by (seed, replica, particle), so
runs are reproducible and the particle process Z and its limit process Zbar
consume the *same* candidates (the shared-randomness coupling that bounds
their pathwise distance by C t / sqrt(N)).  The dominating rate is a rigorous
upper bound on all future intensity given the current convolution state; it is
re-checked whenever the state jumps and rescheduling happens at breaches.
"""

from __future__ import annotations

import concurrent.futures
import heapq
import math
import multiprocessing
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .model import FiringFunction, MemoryKernel, SourceTerm
from .special import kolmogorov_critical, ks_statistic, normal_cdf
from .volterra import SolverConfig, Trajectory, solve_nre

_M32 = (1 << 32) - 1
_M64 = (1 << 64) - 1
#: particle-key reserved for replica-level randomness (source perturbation)
_REPLICA_KEY = _M32


def resolve_threads(threads: Optional[int] = None) -> int:
    """Worker count: explicit argument, else RENEWAL_LAB_THREADS, else 1."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("RENEWAL_LAB_THREADS")
    return max(1, int(env)) if env else 1


class DominatorBreach(Exception):
    """Internal: the running intensity bound exceeded the scheduled dominator."""


@dataclass(frozen=True)
class HawkesConfig:
    """Simulation parameters for the N-particle system."""

    n_particles: int
    t_end: float
    seed: int
    replicas: int = 1
    thinning_margin: float = 1.5
    refresh_horizon: float = 0.1
    track_coupled: bool = True
    xi_perturbation: float = 0.0  # C_xi: xi_N = xi +- (C_xi/sqrt(N)) e^{-t}
    diag_grid_dt: float = 0.0
    subcritical_override: bool = False
    particle_keys: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.t_end <= 0:
            raise ValueError("t_end must be > 0")
        if self.thinning_margin <= 1.0:
            raise ValueError("thinning margin must be > 1")
        if self.refresh_horizon <= 0:
            raise ValueError("refresh horizon must be > 0")
        if self.particle_keys is not None and len(self.particle_keys) != self.n_particles:
            raise ValueError("particle_keys must have one entry per particle")


@dataclass
class HawkesRun:
    """One replica: per-particle event times, coupled limit events, diagnostics."""

    events: list
    coupled_events: Optional[list]
    intensity_grid: Optional[np.ndarray]
    intensity_values: Optional[np.ndarray]
    metadata: dict = field(default_factory=dict)


class _Stream:
    """Buffered draws from a Philox generator keyed by (seed, replica, particle)."""

    __slots__ = ("_gen", "_exp", "_uni", "_ie", "_iu")
    _BUF = 256

    def __init__(self, seed: int, replica: int, particle_key: int):
        key = np.array(
            [seed & _M64, (((replica & _M32) << 32) | (particle_key & _M32)) & _M64],
            dtype=np.uint64,
        )
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self._exp = self._gen.standard_exponential(self._BUF)
        self._uni = self._gen.random(self._BUF)
        self._ie = 0
        self._iu = 0

    def exponential(self) -> float:
        if self._ie == self._BUF:
            self._exp = self._gen.standard_exponential(self._BUF)
            self._ie = 0
        v = self._exp[self._ie]
        self._ie += 1
        return float(v)

    def uniform(self) -> float:
        if self._iu == self._BUF:
            self._uni = self._gen.random(self._BUF)
            self._iu = 0
        v = self._uni[self._iu]
        self._iu += 1
        return float(v)


# ---------------------------------------------------------------------------
# convolution state of the mean-field interaction
# ---------------------------------------------------------------------------


class _ExpState:
    """Y_t = (1/N) sum_j int h(t-s) dZ_s for h = scale * alpha e^{-alpha t} (order 0)."""

    __slots__ = ("alpha", "h0", "y", "t")

    def __init__(self, alpha: float, scale: float):
        self.alpha = alpha
        self.h0 = scale * alpha
        self.y = 0.0
        self.t = 0.0

    def advance(self, t: float) -> None:
        if t > self.t:
            self.y *= math.exp(-self.alpha * (t - self.t))
            self.t = t

    def jump(self, weight: float) -> None:
        self.y += self.h0 * weight

    def value(self) -> float:
        return self.y

    def upper_bound(self) -> float:
        return self.y


class _ErlangState:
    """Convolution state for Erlang kernels of order >= 1 (delayed excitation)."""

    __slots__ = ("order", "alpha", "scale", "s", "t", "peaks")

    def __init__(self, order: int, alpha: float, scale: float):
        self.order = order
        self.alpha = alpha
        self.scale = scale
        self.s = [0.0] * (order + 1)
        self.t = 0.0
        # sup_x x^m e^{-x} / m!  bounds the future transfer from component i to the top
        self.peaks = [m**m * math.exp(-m) / math.factorial(m) if m > 0 else 1.0 for m in range(order + 1)]

    def advance(self, t: float) -> None:
        if t <= self.t:
            return
        ad = self.alpha * (t - self.t)
        dec = math.exp(-ad)
        old = self.s
        new = [0.0] * (self.order + 1)
        for k in range(self.order + 1):
            acc = 0.0
            p = 1.0
            for i in range(k, -1, -1):
                acc += old[i] * p
                p *= ad / (k - i + 1)
            new[k] = dec * acc
        self.s = new
        self.t = t

    def jump(self, weight: float) -> None:
        self.s[0] += self.alpha * weight

    def value(self) -> float:
        return self.scale * self.s[self.order]

    def upper_bound(self) -> float:
        n = self.order
        return self.scale * sum(self.peaks[n - i] * self.s[i] for i in range(n + 1))


class _GeneralState:
    """O(events) fallback for nonnegative kernels without analytic structure."""

    def __init__(self, h: MemoryKernel):
        if not h.nonneg:
            raise ValueError("thinning requires a nonnegative kernel (or Erlang structure)")
        self.h = h
        self.events: list = []
        self.weights: list = []
        self.t = 0.0
        self.support = h.decay.horizon if h.decay.kind == "compact" else math.inf
        # nonincreasing envelope of h for the future bound
        grid = np.linspace(0.0, min(self.support, 200.0), 4001)
        vals = np.asarray(h.evaluator(grid), dtype=float)
        self._env_grid = grid
        self._env = np.maximum.accumulate(vals[::-1])[::-1]

    def advance(self, t: float) -> None:
        self.t = max(self.t, t)
        while self.events and self.t - self.events[0] > self.support:
            self.events.pop(0)
            self.weights.pop(0)

    def jump(self, weight: float) -> None:
        self.events.append(self.t)
        self.weights.append(weight)

    def value(self) -> float:
        if not self.events:
            return 0.0
        offs = self.t - np.asarray(self.events)
        return float(np.dot(np.asarray(self.h.evaluator(offs)), np.asarray(self.weights)))

    def upper_bound(self) -> float:
        if not self.events:
            return 0.0
        offs = self.t - np.asarray(self.events)
        idx = np.minimum(np.searchsorted(self._env_grid, offs, side="right") - 1, self._env.size - 1)
        env = np.where(offs > self._env_grid[-1], 0.0, self._env[np.maximum(idx, 0)])
        return float(np.dot(env, np.asarray(self.weights)))


def _make_state(h: MemoryKernel):
    if h.structure is not None:
        s = h.structure
        if s.scale < 0:
            raise ValueError("thinning requires a nonnegative kernel")
        if s.order == 0:
            return _ExpState(s.alpha, s.scale)
        return _ErlangState(s.order, s.alpha, s.scale)
    return _GeneralState(h)


def _running_sup_from_right(values: np.ndarray) -> np.ndarray:
    return np.maximum.accumulate(values[::-1])[::-1]


# ---------------------------------------------------------------------------
# single-replica simulation
# ---------------------------------------------------------------------------


def simulate_hawkes(
    phi: FiringFunction,
    h: MemoryKernel,
    xi: SourceTerm,
    cfg: HawkesConfig,
    limit: Optional[Trajectory] = None,
    replica: int = 0,
) -> HawkesRun:
    """Simulate one replica of the N-particle system by exact thinning.

    All particles share the mean-field intensity Phi(xi_N + (1/N) sum int h dZ).
    When ``cfg.track_coupled`` is set, the limit processes Zbar^i (inhomogeneous
    Poisson at the deterministic solved intensity) accept from the same
    candidate streams, realising the shared-randomness coupling.
    """
    if not phi.nondecreasing:
        raise ValueError("thinning dominator logic requires a nondecreasing firing function")
    if phi.lip * h.norm_l1 >= 1.0 and not cfg.subcritical_override:
        raise ValueError(
            f"|Phi|_Lip ||h||_1 = {phi.lip * h.norm_l1:.4g} >= 1; "
            "set subcritical_override=True for exploratory runs"
        )

    n = cfg.n_particles
    t_end = cfg.t_end
    margin = cfg.thinning_margin

    if cfg.track_coupled and limit is None:
        limit = solve_nre(phi, h, xi, SolverConfig(t_end=t_end, dt=1e-3))

    # deterministic per-replica source term xi_N
    pert_amp = 0.0
    if cfg.xi_perturbation > 0.0:
        rep_stream = _Stream(cfg.seed, replica, _REPLICA_KEY)
        sign = 1.0 if rep_stream.uniform() < 0.5 else -1.0
        pert_amp = sign * cfg.xi_perturbation / math.sqrt(n)
    xi_scalar = xi.scalar_fn
    if xi_scalar is None:
        ev = xi.evaluator
        xi_scalar = lambda t: float(ev(t))
    if pert_amp != 0.0:
        base_scalar = xi_scalar
        xi_scalar = lambda t: base_scalar(t) + pert_amp * math.exp(-t)

    # running sup of the source from each grid time onward (dominator input)
    sup_dt = min(0.01, cfg.refresh_horizon / 4.0)
    sup_grid = sup_dt * np.arange(int(math.ceil(t_end / sup_dt)) + 2)
    xi_sup = _running_sup_from_right(np.asarray([xi_scalar(t) for t in sup_grid]))

    def xi_future_sup(t: float) -> float:
        return float(xi_sup[min(int(t / sup_dt), xi_sup.size - 1)])

    # running sup of the limit intensity (coupled acceptance must be dominated too)
    if cfg.track_coupled:
        lim_ts, lim_lam = limit.ts, limit.lam
        lim_dt = float(lim_ts[1] - lim_ts[0])
        lim_sup = _running_sup_from_right(lim_lam)
        lim_slope = np.diff(lim_lam, append=lim_lam[-1]) / lim_dt

        def limit_at(t: float) -> float:
            i = min(int(t / lim_dt), lim_lam.size - 1)
            return float(lim_lam[i] + (t - lim_ts[i]) * lim_slope[i])

        def limit_future_sup(t: float) -> float:
            return float(lim_sup[min(int(t / lim_dt), lim_sup.size - 1)])

    else:
        limit_at = lambda t: 0.0
        limit_future_sup = lambda t: 0.0

    phi_s = phi.scalar_fn
    if phi_s is None:
        pev = phi.evaluator
        phi_s = lambda v: float(pev(v))

    state = _make_state(h)
    keys = list(cfg.particle_keys) if cfg.particle_keys is not None else list(range(n))
    streams = [_Stream(cfg.seed, replica, keys[i]) for i in range(n)]
    events = [[] for _ in range(n)]
    coupled = [[] for _ in range(n)] if cfg.track_coupled else None

    def raw_bound(t: float) -> float:
        return max(phi_s(xi_future_sup(t) + state.upper_bound()), limit_future_sup(t))

    lam_bar = margin * max(raw_bound(0.0), 1e-12)
    heap = [(streams[i].exponential() / lam_bar, i) for i in range(n)]
    heapq.heapify(heap)

    breaches = 0
    reschedules = 0
    candidates = 0

    diag_dt = cfg.diag_grid_dt
    diag_ts: list = []
    diag_vals: list = []
    next_diag = 0.0 if diag_dt > 0 else math.inf

    def reschedule_all(now: float, new_bar: float):
        nonlocal lam_bar, heap, reschedules
        lam_bar = new_bar
        heap = [(now + streams[i].exponential() / lam_bar, i) for i in range(n)]
        heapq.heapify(heap)
        reschedules += 1

    next_shrink_check = cfg.refresh_horizon
    while heap:
        s, i = heapq.heappop(heap)
        if s > t_end:
            break
        candidates += 1
        while next_diag <= s:
            state.advance(next_diag)
            diag_ts.append(next_diag)
            diag_vals.append(phi_s(xi_scalar(next_diag) + state.value()))
            next_diag += diag_dt
        state.advance(s)
        lam_z = phi_s(xi_scalar(s) + state.value())
        over_dominator = lam_z > lam_bar * (1.0 + 1e-12)
        if over_dominator:
            # defensive: the rigorous bound makes this unreachable for
            # nondecreasing Phi; if it fires, the candidate is a sure
            # acceptance and the dominator must be rebuilt
            breaches += 1
        u = streams[i].uniform()
        thr = u * lam_bar
        if cfg.track_coupled and thr <= limit_at(s):
            coupled[i].append(s)
        if thr <= lam_z:
            events[i].append(s)
            state.jump(1.0 / n)
            rb = raw_bound(s)
            if rb > lam_bar or over_dominator:
                reschedule_all(s, margin * max(rb, lam_z, 1e-12))
                continue
        elif over_dominator:
            reschedule_all(s, margin * max(raw_bound(s), lam_z, 1e-12))
            continue
        if s >= next_shrink_check:
            next_shrink_check = s + cfg.refresh_horizon
            rb = raw_bound(s)
            if margin * rb < 0.5 * lam_bar:
                reschedule_all(s, margin * max(rb, 1e-12))
                continue
        heapq.heappush(heap, (s + streams[i].exponential() / lam_bar, i))

    if diag_dt > 0:
        while next_diag <= t_end:
            state.advance(next_diag)
            diag_ts.append(next_diag)
            diag_vals.append(phi_s(xi_scalar(next_diag) + state.value()))
            next_diag += diag_dt

    return HawkesRun(
        events=[np.asarray(e) for e in events],
        coupled_events=[np.asarray(e) for e in coupled] if coupled is not None else None,
        intensity_grid=np.asarray(diag_ts) if diag_dt > 0 else None,
        intensity_values=np.asarray(diag_vals) if diag_dt > 0 else None,
        metadata={
            "seed": cfg.seed,
            "replica": replica,
            "n_particles": n,
            "t_end": t_end,
            "candidates": candidates,
            "breaches": breaches,
            "reschedules": reschedules,
            "xi_perturbation_applied": pert_amp,
        },
    )


# ---------------------------------------------------------------------------
# estimator and experiments
# ---------------------------------------------------------------------------


def estimator_path(run: HawkesRun, checkpoints: Sequence[float], particle: int = 0) -> np.ndarray:
    """ell-hat at each checkpoint: Z^i_t / t (particle 1 by exchangeability)."""
    cps = np.asarray(checkpoints, dtype=float)
    if np.any(cps > run.metadata["t_end"] + 1e-12):
        raise ValueError("checkpoints must not exceed the simulated horizon")
    counts = np.searchsorted(run.events[particle], cps, side="right")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(cps > 0, counts / np.where(cps > 0, cps, 1.0), 0.0)
    return out


def path_sup_difference(times_a: np.ndarray, times_b: np.ndarray) -> int:
    """sup_s |A_s - B_s| for two counting processes given their jump times.

    Jumps at identical times cancel (coupled processes share candidate times).
    """
    if times_a.size == 0 and times_b.size == 0:
        return 0
    allt = np.concatenate([times_a, times_b])
    deltas = np.concatenate([np.ones(times_a.size), -np.ones(times_b.size)])
    order = np.argsort(allt, kind="stable")
    ts = allt[order]
    ds = deltas[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(ts)) + 1])
    grouped = np.add.reduceat(ds, starts)
    cum = np.cumsum(grouped)
    return int(np.max(np.abs(cum)))


# fork-shared context for replica workers (closures cannot be pickled)
_MP_CTX: dict = {}


def _mp_worker(replica: int):
    return _MP_CTX["fn"](replica)


def run_replicas(fn: Callable, replicas: int, threads: int = 1) -> list:
    """Run fn(replica) for replica = 0..R-1, optionally on a fork-based pool.

    Results are returned ordered by replica index, so aggregation is
    schedule-independent.
    """
    if threads <= 1 or replicas == 1:
        return [fn(r) for r in range(replicas)]
    _MP_CTX["fn"] = fn
    ctx = multiprocessing.get_context("fork")
    with concurrent.futures.ProcessPoolExecutor(max_workers=min(threads, replicas), mp_context=ctx) as ex:
        return list(ex.map(_mp_worker, range(replicas)))


@dataclass(frozen=True)
class CouplingResult:
    n_values: tuple
    mean_sup_diff: tuple
    bound_values: tuple
    c_tilde: float
    slope: float
    replicas: int
    t_end: float


def coupling_constant(phi: FiringFunction, h: MemoryKernel, lambda_sup: float, c_xi: float = 0.0) -> float:
    """C = (C_xi + ||lambda||_inf^(1/2) ||h||_2) / (1 - ||h||_1 |Phi|_Lip)."""
    denom = 1.0 - h.norm_l1 * phi.lip
    if denom <= 0:
        raise ValueError("coupling constant needs strong subcriticality")
    return (c_xi + math.sqrt(lambda_sup) * h.norm_l2) / denom


def coupling_experiment(
    phi: FiringFunction,
    h: MemoryKernel,
    xi: SourceTerm,
    cfg: HawkesConfig,
    n_values: Sequence[int],
    limit: Optional[Trajectory] = None,
    threads: Optional[int] = None,
) -> CouplingResult:
    """Mean pathwise distance between Z and its coupled limit across system sizes.

    For each N the mean over replicas and particles of sup_{s<=t} |Z_s - Zbar_s|
    is compared against C t / sqrt(N); the log-log slope across N estimates the
    -1/2 scaling.
    """
    threads = resolve_threads(threads)
    if limit is None:
        limit = solve_nre(phi, h, xi, SolverConfig(t_end=cfg.t_end, dt=1e-3))
    means = []
    for n in n_values:
        sub = replace(cfg, n_particles=int(n), track_coupled=True)

        def one(replica: int) -> float:
            run = simulate_hawkes(phi, h, xi, sub, limit=limit, replica=replica)
            diffs = [path_sup_difference(run.events[i], run.coupled_events[i]) for i in range(sub.n_particles)]
            return float(np.mean(diffs))

        vals = run_replicas(one, cfg.replicas, threads)
        means.append(float(np.mean(vals)))
    c_tilde = coupling_constant(phi, h, limit.sup_lambda(), cfg.xi_perturbation)
    bounds = tuple(c_tilde * cfg.t_end / math.sqrt(n) for n in n_values)
    slope = float(np.polyfit(np.log(np.asarray(n_values, dtype=float)), np.log(np.asarray(means)), 1)[0])
    return CouplingResult(
        n_values=tuple(int(v) for v in n_values),
        mean_sup_diff=tuple(means),
        bound_values=bounds,
        c_tilde=c_tilde,
        slope=slope,
        replicas=cfg.replicas,
        t_end=cfg.t_end,
    )


@dataclass(frozen=True)
class CLTResult:
    samples: np.ndarray
    mean: float
    variance: float
    ks_distance: float
    ks_critical_1pct: float
    t_over_n: float
    ell: float
    m_t_over_t: float
    i2_term: float


def clt_experiment(
    phi: FiringFunction,
    h: MemoryKernel,
    xi: SourceTerm,
    cfg: HawkesConfig,
    ell: float,
    limit: Optional[Trajectory] = None,
    threads: Optional[int] = None,
) -> CLTResult:
    """Standardised samples sqrt(t)(ell-hat - ell)/sqrt(ell) across replicas.

    The limit law is standard normal; returns the first two moments and the
    Kolmogorov-Smirnov distance against it, plus the deterministic bias term
    I2 = sqrt(t)(m_t/t - ell) computed from the solved limit equation.
    """
    threads = resolve_threads(threads)
    if cfg.replicas < 100:
        raise ValueError("KS critical values are asymptotic; use at least 100 replicas")
    if phi.lip * h.norm_l1 >= 1.0:
        raise ValueError("the fluctuation result needs strong subcriticality")
    for name, decay in (("source", xi.decay), ("kernel tail", h.decay)):
        # hypotheses: polynomial decay faster than t^{-1/2} (exponential and
        # compact decay are stronger and qualify for any rate)
        if decay.kind == "unclassified":
            raise ValueError(f"{name} decay must be classified for the fluctuation experiment")
        if decay.kind == "polynomial" and decay.rate <= 0.5:
            raise ValueError(f"{name} polynomial decay rate must exceed 1/2, got {decay.rate}")
    t_over_n = cfg.t_end / cfg.n_particles
    if t_over_n > 0.1:
        warnings.warn(f"t/N = {t_over_n:.3g} > 0.1: asymptotic regime is doubtful", UserWarning)
    if limit is None:
        limit = solve_nre(phi, h, xi, SolverConfig(t_end=cfg.t_end, dt=1e-3))
    m_t = float(np.trapezoid(limit.lam, limit.ts))
    i2 = (m_t / cfg.t_end - ell) * math.sqrt(cfg.t_end)

    sub = replace(cfg, track_coupled=False)
    sqrt_t = math.sqrt(cfg.t_end)
    sqrt_ell = math.sqrt(ell)

    def one(replica: int) -> float:
        run = simulate_hawkes(phi, h, xi, sub, replica=replica)
        ell_hat = run.events[0].size / cfg.t_end
        return sqrt_t * (ell_hat - ell) / sqrt_ell

    samples = np.asarray(run_replicas(one, cfg.replicas, threads))
    return CLTResult(
        samples=samples,
        mean=float(np.mean(samples)),
        variance=float(np.var(samples, ddof=1)),
        ks_distance=ks_statistic(samples, normal_cdf),
        ks_critical_1pct=kolmogorov_critical(0.01) / math.sqrt(cfg.replicas),
        t_over_n=t_over_n,
        ell=ell,
        m_t_over_t=m_t / cfg.t_end,
        i2_term=i2,
    )


@dataclass(frozen=True)
class FunctionalCLTResult:
    u_grid: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    covariance: np.ndarray
    replicas: int


def functional_clt_check(
    runs: Sequence[HawkesRun],
    limit: Trajectory,
    u_grid: Sequence[float],
    particle: int = 0,
) -> FunctionalCLTResult:
    """Finite-dimensional check of the Brownian rescaling of Z along u in [0, 1].

    Computes sqrt(m_t) (Z_{ut} - m_{ut}) / m_t per replica at each u; under the
    limit law the mean vanishes, Var -> u and Cov(u, v) -> min(u, v).
    """
    u = np.asarray(u_grid, dtype=float)
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("u grid must lie in [0, 1]")
    t_end = runs[0].metadata["t_end"]
    dt = float(limit.ts[1] - limit.ts[0])
    m_path = np.concatenate([[0.0], np.cumsum(0.5 * (limit.lam[1:] + limit.lam[:-1]) * dt)])
    m_t = float(m_path[-1])
    m_at_u = np.interp(u * t_end, limit.ts, m_path)
    rows = []
    for run in runs:
        counts = np.searchsorted(run.events[particle], u * t_end, side="right")
        rows.append(math.sqrt(m_t) * (counts - m_at_u) / m_t)
    mat = np.asarray(rows)
    cov = np.cov(mat.T) if mat.shape[0] > 1 else np.zeros((u.size, u.size))
    return FunctionalCLTResult(
        u_grid=u,
        means=np.mean(mat, axis=0),
        variances=np.var(mat, axis=0, ddof=1),
        covariance=np.atleast_2d(cov),
        replicas=len(runs),
    )
