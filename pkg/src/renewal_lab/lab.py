"""Command-line experiment runner.

JSON-configured scenarios build model objects by name, run the requested
analysis and write CSV/JSON (and optional SVG) outputs.  Subcommands:

    solve | equilibria | envelope | hawkes | clt | couple | plot | suite

Exit codes: 0 success, 2 mathematically meaningful divergence (solve), 1 error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import model
from .hawkes import (
    HawkesConfig,
    clt_experiment,
    coupling_experiment,
    estimator_path,
    resolve_threads,
    simulate_hawkes,
)
from .model import DecayClass, NoFixedPointError
from .rates import (
    LOG_VS_LOG_T,
    LOG_VS_SQRT_T,
    LOG_VS_T,
    TauOutOfRangeError,
    WindowTooNoisyError,
    build_rate_context,
    calibrate_envelope,
    fit_empirical_rate,
    predict_envelope,
    verify_envelope,
)
from .volterra import (
    NonConvergenceError,
    SolverConfig,
    entry_time,
    equilibrium_locked_source,
    limit_diagnostic,
    read_trajectory_csv,
    solve_nre,
)


class ConfigError(Exception):
    """Invalid experiment configuration; the message names the offending path."""


def _require(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _check_keys(obj: dict, allowed: set, path: str):
    _require(isinstance(obj, dict), path, "expected an object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_kernel(spec: dict, path: str = "kernel"):
    _require(isinstance(spec, dict) and "type" in spec, path, "needs a 'type'")
    kind = spec["type"]
    if kind == "erlang":
        _check_keys(spec, {"type", "n", "alpha"}, path)
        return model.make_erlang_kernel(int(spec.get("n", 1)), float(spec.get("alpha", 1.0)))
    if kind == "exponential":
        _check_keys(spec, {"type", "c", "alpha"}, path)
        return model.make_scaled_exponential_kernel(float(spec.get("c", 1.0)), float(spec.get("alpha", 1.0)))
    if kind == "compact":
        _check_keys(spec, {"type", "profile", "samples", "support", "mass", "height", "resolution"}, path)
        support = float(spec.get("support", 1.0))
        profile = spec.get("profile", "table")
        if profile == "table":
            _require("samples" in spec, path, "compact table kernel needs 'samples'")
            return model.make_compact_kernel(spec["samples"], support)
        res = int(spec.get("resolution", 2001))
        xs = np.linspace(0.0, support, res)
        if profile == "bump":
            mass = float(spec.get("mass", 0.5))
            vals = xs**2 * (support - xs) ** 2
            vals *= mass / (support**5 / 30.0)
            return model.make_compact_kernel(vals, support)
        if profile == "box":
            height = float(spec.get("height", 1.0))
            return model.make_compact_kernel(np.full(res, height), support)
        if profile == "triangle":
            height = float(spec.get("height", 1.0))
            return model.make_compact_kernel(height * (1.0 - xs / support), support)
        raise ConfigError(f"{path}.profile: unknown profile {profile!r}")
    raise ConfigError(f"{path}.type: unknown kernel type {kind!r}")


def build_phi(spec: dict, path: str = "phi"):
    _require(isinstance(spec, dict) and "type" in spec, path, "needs a 'type'")
    kind = spec["type"]
    if kind == "sigmoid":
        _check_keys(spec, {"type", "base", "gain", "slope", "center"}, path)
        return model.make_sigmoid_phi(
            float(spec.get("base", 0.5)),
            float(spec.get("gain", 1.0)),
            float(spec.get("slope", 8.0)),
            float(spec.get("center", 1.0)),
        )
    if kind == "cubic_sigmoid":
        _check_keys(spec, {"type", "base", "gain", "slope", "center"}, path)
        return model.make_cubic_sigmoid_phi(
            float(spec.get("base", 0.5)),
            float(spec.get("gain", 1.0)),
            float(spec.get("slope", 8.0)),
            float(spec.get("center", 1.0)),
        )
    if kind == "affine":
        _check_keys(spec, {"type", "mu"}, path)
        return model.make_affine_phi(float(spec.get("mu", 1.0)))
    if kind == "constant":
        _check_keys(spec, {"type", "value"}, path)
        return model.make_constant_phi(float(spec.get("value", 1.0)))
    if kind == "divergence_example":
        _check_keys(spec, {"type"}, path)
        return model.make_divergence_example_phi()
    raise ConfigError(f"{path}.type: unknown firing-function type {kind!r}")


def build_source(spec: dict, h, phi, solver_cfg: Optional[SolverConfig] = None, path: str = "source"):
    _require(isinstance(spec, dict) and "type" in spec, path, "needs a 'type'")
    kind = spec["type"]
    pert = spec.get("perturbation")
    base_keys = {"type", "perturbation"}
    if kind == "empty":
        _check_keys(spec, base_keys, path)
        src = model.make_source_empty()
    elif kind == "equilibrium":
        _check_keys(spec, base_keys | {"ell"}, path)
        src = model.make_source_equilibrium(h, float(spec["ell"]))
    elif kind == "locked_equilibrium":
        _check_keys(spec, base_keys | {"ell"}, path)
        _require(solver_cfg is not None, path, "locked equilibrium source needs a solver block")
        src = equilibrium_locked_source(phi, h, float(spec["ell"]), solver_cfg)
    elif kind == "tail":
        _check_keys(spec, base_keys | {"ell0"}, path)
        src = model.make_source_tail(h, float(spec["ell0"]))
    elif kind == "chi_perturbed":
        _check_keys(spec, base_keys | {"ell0", "chi"}, path)
        chi_spec = spec.get("chi", {"type": "kernel_tail"})
        _check_keys(chi_spec, {"type", "a"}, f"{path}.chi")
        if chi_spec["type"] == "kernel_tail":
            chi = lambda t: h.signed_tail(t)
            chi_p = lambda t: -np.asarray(h.evaluator(t), dtype=float)
            decay = h.decay
        elif chi_spec["type"] == "poly":
            a = float(chi_spec.get("a", 1.0))
            norm = h.norm_l1
            chi = lambda t: norm / (1.0 + np.asarray(t, dtype=float)) ** a
            chi_p = lambda t: -a * norm / (1.0 + np.asarray(t, dtype=float)) ** (a + 1.0)
            decay = DecayClass.polynomial(rate=a, constant=norm)
        else:
            raise ConfigError(f"{path}.chi.type: unknown chi type")
        src = model.make_source_chi_perturbed(h, phi, float(spec["ell0"]), chi, chi_p, decay)
    elif kind == "erlang_poly":
        _check_keys(spec, base_keys | {"n", "alpha", "c"}, path)
        src = model.make_source_erlang_polynomial(int(spec["n"]), float(spec["alpha"]), spec["c"])
    elif kind == "divergence_example":
        _check_keys(spec, base_keys | {"a"}, path)
        src = model.make_source_divergence_example(float(spec.get("a", 2.0)))
    else:
        raise ConfigError(f"{path}.type: unknown source type {kind!r}")
    if pert is not None:
        _check_keys(pert, {"amplitude", "rate"}, f"{path}.perturbation")
        src = model.add_exponential_perturbation(src, float(pert["amplitude"]), float(pert.get("rate", 1.0)))
    return src


def build_solver(spec: dict, path: str = "solver") -> SolverConfig:
    _check_keys(spec, {"dt", "t_end", "quadrature", "inner_tol", "inner_max_iter", "picard_mode", "picard_tol", "picard_max_iter"}, path)
    _require("t_end" in spec, path, "needs 't_end'")
    return SolverConfig(
        t_end=float(spec["t_end"]),
        dt=float(spec.get("dt", 1e-3)),
        quadrature=spec.get("quadrature", "trapezoid"),
        inner_tol=float(spec.get("inner_tol", 1e-12)),
        inner_max_iter=int(spec.get("inner_max_iter", 50)),
        picard_mode=bool(spec.get("picard_mode", False)),
        picard_tol=float(spec.get("picard_tol", 1e-13)),
        picard_max_iter=int(spec.get("picard_max_iter", 200)),
    )


def build_hawkes_config(spec: dict, seed: int, path: str = "hawkes") -> HawkesConfig:
    _check_keys(
        spec,
        {"n_particles", "t_end", "replicas", "margin", "refresh", "track_coupled", "xi_perturbation",
         "diag_grid_dt", "subcritical_override", "coupling_sizes", "ell", "checkpoints"},
        path,
    )
    _require("n_particles" in spec and "t_end" in spec, path, "needs 'n_particles' and 't_end'")
    return HawkesConfig(
        n_particles=int(spec["n_particles"]),
        t_end=float(spec["t_end"]),
        seed=seed,
        replicas=int(spec.get("replicas", 1)),
        thinning_margin=float(spec.get("margin", 1.5)),
        refresh_horizon=float(spec.get("refresh", 0.1)),
        track_coupled=bool(spec.get("track_coupled", True)),
        xi_perturbation=float(spec.get("xi_perturbation", 0.0)),
        diag_grid_dt=float(spec.get("diag_grid_dt", 0.0)),
        subcritical_override=bool(spec.get("subcritical_override", False)),
    )


_TOP_KEYS = {"scenario", "seed", "kernel", "phi", "source", "solver", "limit_window", "rates", "hawkes"}


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    _check_keys(cfg, _TOP_KEYS, "config")
    return cfg


# ---------------------------------------------------------------------------
# stability / report serialisation
# ---------------------------------------------------------------------------


def _stability_dict(st) -> dict:
    out = {"kind": st.kind}
    if st.p is not None:
        out.update(p=st.p, sign_of_phi_p=st.sign_of_phi_p, above=st.above, below=st.below)
    if st.note:
        out["note"] = st.note
    return out


def _report_dict(r) -> dict:
    return {
        "ell": r.ell,
        "kappa_ell": r.kappa_ell,
        "tau0": r.tau0,
        "residual": r.residual,
        "stability": _stability_dict(r.stability),
    }


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_solve(cfg: dict, out: Path, seed: int) -> int:
    solver = build_solver(cfg.get("solver", {}))
    h = build_kernel(cfg["kernel"])
    phi = build_phi(cfg["phi"])
    xi = build_source(cfg.get("source", {"type": "empty"}), h, phi, solver)
    traj = solve_nre(phi, h, xi, solver)
    traj.to_csv(out / "trajectory.csv")
    try:
        reports = model.find_fixed_points(phi, h)
    except NoFixedPointError:
        reports = []
    window = float(cfg.get("limit_window", min(10.0, 0.25 * solver.t_end)))
    diag = limit_diagnostic(traj, reports, window=window)
    _write_json(
        out / "limit.json",
        {
            "scenario": cfg.get("scenario", ""),
            "verdict": diag.kind,
            "ell": diag.ell,
            "residual": diag.residual,
            "tail_oscillation": diag.tail_oscillation,
            "tail_slope": diag.tail_slope,
            "fixed_points": [_report_dict(r) for r in reports],
            "divergent": traj.divergent,
            "config": cfg,
            "seed": seed,
        },
    )
    print(f"solve: {cfg.get('scenario', '?')} -> {diag.kind}" + (f" (ell={diag.ell:.6g})" if diag.ell else ""))
    return 2 if diag.kind == "divergent" else 0


def cmd_equilibria(cfg: dict, out: Path, seed: int) -> int:
    h = build_kernel(cfg["kernel"])
    phi = build_phi(cfg["phi"])
    try:
        reports = model.find_fixed_points(phi, h)
        payload = [_report_dict(r) for r in reports]
    except NoFixedPointError as exc:
        payload = {"empty": True, "message": str(exc)}
    _write_json(out / "fixed_points.json", {"scenario": cfg.get("scenario", ""), "fixed_points": payload, "config": cfg})
    print(f"equilibria: wrote {out / 'fixed_points.json'}")
    return 0


_FIT_MODELS = {"log-vs-t": LOG_VS_T, "log-vs-log-t": LOG_VS_LOG_T, "log-vs-sqrt-t": LOG_VS_SQRT_T}


def cmd_envelope(cfg: dict, out: Path, seed: int) -> int:
    solver = build_solver(cfg.get("solver", {}))
    h = build_kernel(cfg["kernel"])
    phi = build_phi(cfg["phi"])
    xi = build_source(cfg.get("source", {"type": "empty"}), h, phi, solver)
    rspec = cfg.get("rates", {})
    _check_keys(rspec, {"eps0", "window", "fit_model", "slack", "calibrate", "lambda_sup_headroom"}, "rates")
    traj = solve_nre(phi, h, xi, solver)
    traj.to_csv(out / "trajectory.csv")
    reports = model.find_fixed_points(phi, h)
    window = float(cfg.get("limit_window", min(10.0, 0.25 * solver.t_end)))
    diag = limit_diagnostic(traj, reports, window=window)
    if diag.kind != "converged":
        raise RuntimeError(f"trajectory did not converge (verdict {diag.kind}); no rate analysis possible")
    report = next(r for r in reports if r.ell == diag.ell)
    eps0 = float(rspec.get("eps0", 0.1))
    headroom = float(rspec.get("lambda_sup_headroom", 1.05))
    t0 = entry_time(traj, report.ell, eps0)
    ctx = build_rate_context(
        report, phi, h,
        lambda_sup=headroom * traj.sup_lambda(),
        eps0=eps0, t0=t0,
        xi_decay=xi.decay, h_decay=h.decay,
    )
    env = predict_envelope(ctx)
    env_used = calibrate_envelope(env, traj, report.ell) if rspec.get("calibrate", True) else env
    ok, worst = verify_envelope(traj, report.ell, env_used, slack=float(rspec.get("slack", 1.0)))
    fit_payload = None
    if "window" in rspec:
        fmodel = _FIT_MODELS[rspec.get("fit_model", "log-vs-t")]
        fit = fit_empirical_rate(traj, report.ell, tuple(rspec["window"]), fmodel)
        fit_payload = {"model": fit.model, "slope": fit.slope, "intercept": fit.intercept,
                       "r_squared": fit.r_squared, "n_points": fit.n_points}
    _write_json(
        out / "envelope.json",
        {
            "scenario": cfg.get("scenario", ""),
            "ell": report.ell,
            "tau0": report.tau0,
            "tau": ctx.tau,
            "t0": t0,
            "envelope": env.to_dict(),
            "calibrated_C": env_used.C,
            "verified": bool(ok),
            "worst_ratio": worst,
            "fit": fit_payload,
            "config": cfg,
        },
    )
    mask = traj.ts >= env_used.sigma_t0
    with open(out / "fit.csv", "w") as fh:
        fh.write("t,abs_error,bound\n")
        bound = env_used.evaluate(traj.ts[mask])
        for t, e, b in zip(traj.ts[mask], np.abs(traj.lam[mask] - report.ell), bound):
            fh.write(f"{t:.17g},{e:.17g},{b:.17g}\n")
    print(f"envelope: case {env.case}, verified={ok}, worst ratio {worst:.3g}")
    return 0


def _write_events_csv(path, runs):
    with open(path, "w") as fh:
        fh.write("replica,particle,event_time\n")
        for rep_idx, run in enumerate(runs):
            for p, ev in enumerate(run.events):
                for t in ev:
                    fh.write(f"{rep_idx},{p},{t:.17g}\n")


def cmd_hawkes(cfg: dict, out: Path, seed: int, threads: int) -> int:
    h = build_kernel(cfg["kernel"])
    phi = build_phi(cfg["phi"])
    hspec = dict(cfg.get("hawkes", {}))
    hcfg = build_hawkes_config(hspec, seed)
    xi = build_source(cfg.get("source", {"type": "empty"}), h, phi)
    runs = [simulate_hawkes(phi, h, xi, hcfg, replica=r) for r in range(hcfg.replicas)]
    _write_events_csv(out / "events.csv", runs)
    checkpoints = hspec.get("checkpoints", [0.25 * hcfg.t_end, 0.5 * hcfg.t_end, hcfg.t_end])
    est = estimator_path(runs[0], checkpoints)
    _write_json(
        out / "summary.json",
        {
            "scenario": cfg.get("scenario", ""),
            "total_events": int(sum(sum(e.size for e in run.events) for run in runs)),
            "estimator_checkpoints": list(map(float, checkpoints)),
            "estimator_values": [float(v) for v in est],
            "candidates": int(sum(run.metadata["candidates"] for run in runs)),
            "breaches": int(sum(run.metadata["breaches"] for run in runs)),
            "config": cfg,
            "seed": seed,
        },
    )
    print(f"hawkes: {sum(sum(e.size for e in run.events) for run in runs)} events over {hcfg.replicas} replica(s)")
    return 0


def cmd_clt(cfg: dict, out: Path, seed: int, threads: int) -> int:
    h = build_kernel(cfg["kernel"])
    phi = build_phi(cfg["phi"])
    hspec = dict(cfg.get("hawkes", {}))
    ell = hspec.get("ell")
    _require(ell is not None, "hawkes.ell", "clt experiment needs the limit value 'ell'")
    hcfg = build_hawkes_config(hspec, seed)
    xi = build_source(cfg.get("source", {"type": "empty"}), h, phi)
    res = clt_experiment(phi, h, xi, hcfg, ell=float(ell), threads=threads)
    with open(out / "samples.csv", "w") as fh:
        fh.write("replica,standardized\n")
        for i, v in enumerate(res.samples):
            fh.write(f"{i},{v:.17g}\n")
    _write_json(
        out / "summary.json",
        {
            "scenario": cfg.get("scenario", ""),
            "mean": res.mean,
            "variance": res.variance,
            "ks_distance": res.ks_distance,
            "ks_critical_1pct": res.ks_critical_1pct,
            "t_over_n": res.t_over_n,
            "i2_term": res.i2_term,
            "m_t_over_t": res.m_t_over_t,
            "config": cfg,
            "seed": seed,
        },
    )
    print(f"clt: mean={res.mean:.4f} var={res.variance:.4f} KS={res.ks_distance:.4f} (crit {res.ks_critical_1pct:.4f})")
    return 0


def cmd_couple(cfg: dict, out: Path, seed: int, threads: int) -> int:
    h = build_kernel(cfg["kernel"])
    phi = build_phi(cfg["phi"])
    hspec = dict(cfg.get("hawkes", {}))
    sizes = hspec.get("coupling_sizes", [100, 400, 1600])
    hcfg = build_hawkes_config(hspec, seed)
    xi = build_source(cfg.get("source", {"type": "empty"}), h, phi)
    res = coupling_experiment(phi, h, xi, hcfg, n_values=sizes, threads=threads)
    _write_json(
        out / "summary.json",
        {
            "scenario": cfg.get("scenario", ""),
            "n_values": list(res.n_values),
            "mean_sup_diff": list(res.mean_sup_diff),
            "bound_values": list(res.bound_values),
            "c_tilde": res.c_tilde,
            "slope": res.slope,
            "replicas": res.replicas,
            "config": cfg,
            "seed": seed,
        },
    )
    print(f"couple: means {tuple(round(m, 4) for m in res.mean_sup_diff)}, slope {res.slope:.3f}")
    return 0


# ---------------------------------------------------------------------------
# deterministic SVG plots
# ---------------------------------------------------------------------------

_PALETTE = ("#c0392b", "#2471a3", "#1e8449", "#7d3c98", "#b7950b", "#2c3e50")


def _ticks(lo: float, hi: float, n: int = 6):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * step:
        out.append(round(v, 12))
        v += step
    return out


def render_svg(series, path, title="", xlabel="t", ylabel="", log_y=False):
    """Write a fixed-viewbox, timestamp-free SVG line plot (diffable output)."""
    width, height = 860, 540
    ml, mr, mt, mb = 70, 20, 40, 50
    xs_all = np.concatenate([np.asarray(s["xs"], dtype=float) for s in series])
    ys_all = np.concatenate([np.asarray(s["ys"], dtype=float) for s in series])
    if log_y:
        ys_all = ys_all[ys_all > 0]
        if ys_all.size == 0:
            raise ValueError("log-scale plot needs positive values")
    x_lo, x_hi = float(np.min(xs_all)), float(np.max(xs_all))
    y_lo, y_hi = float(np.min(ys_all)), float(np.max(ys_all))
    if log_y:
        y_lo, y_hi = math.log10(y_lo), math.log10(y_hi)
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def py(y):
        if log_y:
            y = math.log10(max(y, 10.0 ** (y_lo)))
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.6g}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<text x="{width/2:.6g}" y="{height-10}" text-anchor="middle" font-size="13">{xlabel}</text>',
        f'<text x="18" y="{height/2:.6g}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {height/2:.6g})">{ylabel}</text>',
        f'<rect x="{ml}" y="{mt}" width="{width-ml-mr}" height="{height-mt-mb}" fill="none" stroke="#333"/>',
    ]
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{px(tx):.6g}" y1="{height-mb}" x2="{px(tx):.6g}" y2="{height-mb+5}" stroke="#333"/>')
        parts.append(f'<text x="{px(tx):.6g}" y="{height-mb+20}" text-anchor="middle" font-size="11">{tx:.6g}</text>')
    for ty in _ticks(y_lo, y_hi):
        yy = height - mb - (ty - y_lo) / (y_hi - y_lo) * (height - mt - mb)
        label = f"1e{ty:.6g}" if log_y else f"{ty:.6g}"
        parts.append(f'<line x1="{ml-5}" y1="{yy:.6g}" x2="{ml}" y2="{yy:.6g}" stroke="#333"/>')
        parts.append(f'<text x="{ml-8}" y="{yy+4:.6g}" text-anchor="end" font-size="11">{label}</text>')
    for k, s in enumerate(series):
        xs = np.asarray(s["xs"], dtype=float)
        ys = np.asarray(s["ys"], dtype=float)
        if log_y:
            keep = ys > 0
            xs, ys = xs[keep], ys[keep]
        stride = max(1, xs.size // 2000)
        pts = " ".join(f"{px(x):.6g},{py(y):.6g}" for x, y in zip(xs[::stride], ys[::stride]))
        color = s.get("color", _PALETTE[k % len(_PALETTE)])
        dash = ' stroke-dasharray="6 4"' if s.get("dashed") else ""
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>')
        if s.get("label"):
            yleg = mt + 18 + 16 * k
            parts.append(f'<line x1="{width-190}" y1="{yleg-4}" x2="{width-160}" y2="{yleg-4}" stroke="{color}" stroke-width="2"{dash}/>')
            parts.append(f'<text x="{width-154}" y="{yleg}" font-size="12">{s["label"]}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
        fh.write("\n")


def cmd_plot(args) -> int:
    if not args.csv:
        raise ConfigError("plot: no input CSV files given")
    series = []
    for path in args.csv:
        traj = read_trajectory_csv(path)
        col = args.column
        if col == "lambda":
            ys = traj.lam
        elif col == "x":
            ys = traj.x
        else:
            raise ConfigError(f"plot: unknown column {col!r} (expected 'lambda' or 'x')")
        series.append({"xs": traj.ts, "ys": ys, "label": Path(path).stem})
    if args.envelope:
        with open(args.envelope) as fh:
            env_doc = json.load(fh)
        env = env_doc["envelope"]
        ell = env_doc["ell"]
        C = env_doc.get("calibrated_C", env["C"])
        ts = np.asarray(series[0]["xs"], dtype=float)
        ts = ts[ts >= env["sigma_t0"]]
        from .rates import Envelope

        e = Envelope(shape=env["shape"], params=env["params"], C=C, sigma_t0=env["sigma_t0"], case=env["case"])
        series.append({"xs": ts, "ys": ell + e.evaluate(ts), "label": "bound+", "dashed": True, "color": "#555555"})
        series.append({"xs": ts, "ys": ell - e.evaluate(ts), "label": "bound-", "dashed": True, "color": "#555555"})
    render_svg(series, args.out, title=args.title, xlabel="t", ylabel=args.column, log_y=args.log_y)
    print(f"plot: wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# acceptance suite
# ---------------------------------------------------------------------------


def cmd_suite(out: Path, only=None, threads: int = 1) -> int:
    from . import acceptance

    results = acceptance.run_all(only=only, threads=threads)
    payload = []
    all_ok = True
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        all_ok &= res.passed
        print(f"[{status}] {res.name}  ({res.runtime:.1f}s)  {res.detail}")
        payload.append({"name": res.name, "passed": res.passed, "detail": res.detail, "runtime": res.runtime})
    _write_json(out / "suite_report.json", payload)
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", required=True, help="JSON experiment configuration")
    sub.add_argument("--out", default=".", help="output directory")
    sub.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    sub.add_argument("--threads", type=int, default=None, help="worker processes (or RENEWAL_LAB_THREADS)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="renewal-lab", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("solve", "equilibria", "envelope", "hawkes", "clt", "couple"):
        _add_common(subs.add_parser(name))
    p_plot = subs.add_parser("plot")
    p_plot.add_argument("--csv", nargs="+", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--column", default="lambda")
    p_plot.add_argument("--title", default="")
    p_plot.add_argument("--envelope", default=None, help="envelope.json to overlay")
    p_plot.add_argument("--log-y", action="store_true")
    p_suite = subs.add_parser("suite")
    p_suite.add_argument("--out", default=".")
    p_suite.add_argument("--only", default=None, help="comma-separated criterion numbers")
    p_suite.add_argument("--threads", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "plot":
            return cmd_plot(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "suite":
            only = [int(v) for v in args.only.split(",")] if args.only else None
            return cmd_suite(out, only=only, threads=resolve_threads(args.threads))
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        threads = resolve_threads(args.threads)
        if args.command == "solve":
            return cmd_solve(cfg, out, seed)
        if args.command == "equilibria":
            return cmd_equilibria(cfg, out, seed)
        if args.command == "envelope":
            return cmd_envelope(cfg, out, seed)
        if args.command == "hawkes":
            return cmd_hawkes(cfg, out, seed, threads)
        if args.command == "clt":
            return cmd_clt(cfg, out, seed, threads)
        if args.command == "couple":
            return cmd_couple(cfg, out, seed, threads)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (
        ValueError,
        NoFixedPointError,
        RuntimeError,
        TauOutOfRangeError,
        WindowTooNoisyError,
        NonConvergenceError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
