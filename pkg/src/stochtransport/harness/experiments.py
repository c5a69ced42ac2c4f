"""The five canonical experiment pipelines."""
from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from ..diagnostics import holder_estimate, sobolev_w1r_norm
from ..drift import (MixedNormSpec, constant_drift, krylov_rockner_check, make_drift,
                     mixed_norm, mixed_norm_distance, mollify_drift)
from ..errors import ExperimentError, StochTransportError, UnknownExperimentError
from ..flow import flow_moment_estimates, integrate_flow, sample_noise
from ..grids import SpatialGrid
from ..transport import (InitialConditionSpec, ScalarFieldGrid, representation_series,
                         representation_solution, weak_form_residual)
from ..zvonkin import (PDEGridSpec, conjugacy_residual, gamma_apply, gamma_invert,
                       gradient_bound_sweep, inverse_gradient_bound,
                       quadratic_variation_estimate, save_solution, solve_backward_pde)

# frozen from the triple-resolution calibration (tests/fixtures/shock_kappa.json)
SHOCK_KAPPA = 6.5334766369539405


@dataclass
class Table:
    name: str
    columns: list  # [(name, type)] with type in float | int | bool | str
    rows: list = field(default_factory=list)


@dataclass
class Result:
    tables: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    extra_files: list = field(default_factory=list)


class _Stages:
    def __init__(self, result):
        self.result = result

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except StochTransportError as exc:
            raise ExperimentError(name, exc) from exc
        finally:
            self.result.timings[name] = self.result.timings.get(name, 0.0) + (
                time.perf_counter() - t0)


def build_drift(cfg, half_width=None, T=None):
    spec = dict(cfg.drift)
    kind = spec.pop("kind")
    return make_drift(kind, d=cfg.d, half_width=cfg.half_width if half_width is None else half_width,
                      T=cfg.T if T is None else T, **spec)


def build_u0(cfg):
    spec = dict(cfg.u0)
    kind = spec.pop("kind")
    return InitialConditionSpec(kind, spec, cfg.d)


def build_grid(cfg, points=None):
    return SpatialGrid.box(cfg.half_width, cfg.points if points is None else points, cfg.d)


def _refined(points):
    return 2 * points - 1


# -- shock_demo --------------------------------------------------------------

def _field_stats(u, alphas, rs):
    hol = {a: np.atleast_1d(holder_estimate(u, a).value) for a in alphas}
    sob = {r: tuple(np.atleast_1d(v) for v in sobolev_w1r_norm(u, r)) for r in rs}
    return hol, sob


def _shock_field(cfg, b, u0, sigma, grid, noise, t):
    if t == 0:
        return ScalarFieldGrid.from_function(grid, u0, "u0"), ()
    fl = integrate_flow(b, sigma, grid, noise, "backward", horizon=t, record="end",
                        threads=cfg.threads)
    return representation_solution(u0, fl, t), fl.warnings


def shock_demo(cfg):
    res = Result()
    stage = _Stages(res)
    alpha = float(cfg.option("holder_alpha", 0.9))
    t_shock = float(cfg.option("shock_time", 1.5))
    jump = float(cfg.option("jump_factor", 10.0))
    kappa = float(cfg.option("kappa", SHOCK_KAPPA))
    growth_thr = float(cfg.option("growth_threshold", 1.5))
    alphas = sorted(set(float(a) for a in cfg.alphas) | {alpha})
    times = sorted(set(float(t) for t in cfg.times) | {0.0, t_shock})
    qs = (0.5, 0.9)
    with stage("setup"):
        b = build_drift(cfg)
        u0 = build_u0(cfg)
        grid = build_grid(cfg)
    hol_tab = Table("holder_series.csv", [("sigma", "float"), ("t", "float"),
                                          ("alpha", "float"), ("quantile", "float"),
                                          ("value", "float")])
    sob_tab = Table("sobolev_series.csv", [("sigma", "float"), ("t", "float"), ("r", "float"),
                                           ("quantile", "float"), ("lr", "float"),
                                           ("grad_lr", "float")])
    sum_tab = Table("shock_summary.csv", [("sigma", "float"), ("points", "int"),
                                          ("t", "float"), ("median_holder", "float"),
                                          ("ratio_to_t0", "float")])
    medians = {}
    finite = {}
    for sigma in cfg.sigmas:
        sigma = float(sigma)
        M = 1 if sigma == 0 else cfg.paths
        with stage(f"noise[sigma={sigma:g}]"):
            noise = sample_noise(cfg.seed, M, cfg.d, cfg.dt, cfg.T)
            res.warnings += list(noise.warnings)
        finite[sigma] = True
        for t in times:
            with stage(f"flow[sigma={sigma:g}]"):
                u, warn = _shock_field(cfg, b, u0, sigma, grid, noise, t)
                res.warnings += list(warn)
            with stage(f"diagnostics[sigma={sigma:g}]"):
                hol, sob = _field_stats(u, alphas, cfg.rs)
            for a in alphas:
                finite[sigma] &= bool(np.all(np.isfinite(hol[a])))
                for q in qs:
                    hol_tab.rows.append({"sigma": sigma, "t": t, "alpha": a, "quantile": q,
                                         "value": float(np.quantile(hol[a], q))})
            for r in cfg.rs:
                lr, gr = sob[r]
                for q in qs:
                    sob_tab.rows.append({"sigma": sigma, "t": t, "r": float(r), "quantile": q,
                                         "lr": float(np.quantile(lr, q)),
                                         "grad_lr": float(np.quantile(gr, q))})
            medians[(sigma, cfg.points, t)] = float(np.median(hol[alpha]))
        if cfg.option("refine_check", True):
            fine = build_grid(cfg, _refined(cfg.points))
            for t in (0.0, t_shock):
                with stage(f"refine[sigma={sigma:g}]"):
                    u, warn = _shock_field(cfg, b, u0, sigma, fine, noise, t)
                    res.warnings += list(warn)
                    medians[(sigma, fine.n[0], t)] = float(
                        np.median(holder_estimate(u, alpha).value))
    for (sigma, pts, t), med in sorted(medians.items()):
        base = medians[(sigma, pts, 0.0)]
        sum_tab.rows.append({"sigma": sigma, "points": pts, "t": t, "median_holder": med,
                             "ratio_to_t0": med / base if base > 0 else math.inf})
    res.tables += [hol_tab, sob_tab, sum_tab]
    fine_pts = _refined(cfg.points)
    verdicts = {}
    details = {}
    for sigma in map(float, cfg.sigmas):
        ratio = medians[(sigma, cfg.points, t_shock)] / medians[(sigma, cfg.points, 0.0)]
        growth = None
        if (sigma, fine_pts, t_shock) in medians:
            growth = medians[(sigma, fine_pts, t_shock)] / medians[(sigma, cfg.points, t_shock)]
        details[f"sigma={sigma:g}"] = {"ratio": ratio, "grid_growth": growth}
        if sigma == 0:
            verdicts["deterministic_jump"] = bool(
                ratio >= jump and (growth is None or growth >= growth_thr))
        else:
            ok = ratio <= kappa and (growth is None or growth < growth_thr)
            verdicts["noisy_bounded"] = bool(verdicts.get("noisy_bounded", True) and ok)
            verdicts["holder_finite"] = bool(verdicts.get("holder_finite", True)
                                             and finite[sigma] and u0.sobolev_regular)
    details.update({"alpha": alpha, "shock_time": t_shock, "jump_factor": jump, "kappa": kappa,
                    "growth_threshold": growth_thr})
    res.verdicts = verdicts
    res.details = details
    return res


def calibrate_shock_kappa(cfg, resolutions=(401, 801, 1601), margin=1.25):
    """kappa = margin * max over resolutions of the noisy median Hoelder ratio C(t*)/C(0)."""
    alpha = float(cfg.option("holder_alpha", 0.9))
    t_shock = float(cfg.option("shock_time", 1.5))
    sigma = max(float(s) for s in cfg.sigmas)
    b = build_drift(cfg)
    u0 = build_u0(cfg)
    noise = sample_noise(cfg.seed, cfg.paths, cfg.d, cfg.dt, cfg.T)
    ratios = {}
    for n in resolutions:
        grid = build_grid(cfg, n)
        meds = [float(np.median(holder_estimate(
            _shock_field(cfg, b, u0, sigma, grid, noise, t)[0], alpha).value))
            for t in (0.0, t_shock)]
        ratios[int(n)] = meds[1] / meds[0]
    return {"kappa": margin * max(ratios.values()), "margin": margin, "ratios": ratios,
            "sigma": sigma, "alpha": alpha, "shock_time": t_shock, "seed": cfg.seed,
            "paths": cfg.paths}


# -- mollify_convergence / moment_bounds -------------------------------------

def _moment_setup(cfg):
    b = build_drift(cfg)
    levels = [int(n) for n in cfg.mollify]
    seq = [mollify_drift(b, n) for n in levels]
    npts = int(cfg.option("moment_points", 9))
    hw = float(cfg.option("moment_half_width", min(1.0, cfg.half_width)))
    pts = np.linspace(-hw, hw, npts)[:, None] if cfg.d == 1 else \
        SpatialGrid.box(hw, npts, cfg.d).points
    return b, levels, seq, pts


def _band(mean, se):
    """True when no pair of levels differs by more than 2 combined standard errors."""
    n = len(mean)
    return all(abs(mean[i] - mean[j]) <= 2 * math.hypot(se[i], se[j])
               for i in range(n) for j in range(i + 1, n))


def _doubling_stable(mean, se):
    """Consecutive levels agree within 2 combined standard errors."""
    return all(math.isfinite(a) and math.isfinite(b) and abs(b - a) <= 2 * math.hypot(sa, sb)
               for a, b, sa, sb in zip(mean, mean[1:], se, se[1:]))


def _nonincreasing(mean, se):
    return all(mean[i + 1] <= mean[i] + 2 * math.hypot(se[i], se[i + 1])
               for i in range(len(mean) - 1))


def _moment_table(cfg, res, stage, with_conv=True):
    with stage("setup"):
        b, levels, seq, pts = _moment_setup(cfg)
        noise = sample_noise(cfg.seed, cfg.paths, cfg.d, cfg.dt, cfg.T)
        res.warnings += list(noise.warnings)
    with stage("moments"):
        reference = b if with_conv else None
        tab = flow_moment_estimates(seq, cfg.sigma, pts, noise, cfg.p_exp, reference=reference,
                                    h=cfg.option("fd_step", None),
                                    record=int(cfg.option("record_every", 10)),
                                    labels=levels, threads=cfg.threads)
        res.warnings += list(tab.warnings)
    return b, levels, seq, tab


def mollify_convergence(cfg):
    res = Result()
    stage = _Stages(res)
    b, levels, seq, tab = _moment_table(cfg, res, stage)
    cols = [("n", "int"), ("p_exp", "float"), ("conv_mean", "float"), ("conv_se", "float"),
            ("grad_mean", "float"), ("grad_se", "float"), ("reliable", "bool"),
            ("min_paths", "int")]
    t = Table("moments.csv", cols)
    for row in tab.rows():
        row = dict(row)
        row["n"] = row.pop("level")
        t.rows.append(row)
    norm_tab = Table("mollify_norms.csv", [("n", "int"), ("distance", "float"),
                                           ("distance_error", "float"), ("norm", "float")])
    with stage("norms"):
        spec = MixedNormSpec(float(cfg.option("norm_p", 4.0)), float(cfg.option("norm_q", 4.0)),
                             cfg.T, cfg.d)
        res_q = 400 if cfg.d == 1 else 100
        for n, bn in zip(levels, seq):
            dist = mixed_norm_distance(bn, b, spec, resolution=4 * res_q)
            norm_tab.rows.append({"n": n, "distance": dist.value, "distance_error": dist.error,
                                  "norm": mixed_norm(bn, spec, resolution=4 * res_q).value})
    res.tables += [t, norm_tab]
    conv_ok = all(_nonincreasing(tab.conv_mean[:, k], tab.conv_se[:, k])
                  for k in range(len(tab.p_exp)))
    grad_ok = all(_band(tab.grad_mean[:, k], tab.grad_se[:, k]) for k in range(len(tab.p_exp)))
    dists = [r["distance"] for r in norm_tab.rows]
    res.verdicts = {"convergence_nonincreasing": bool(conv_ok),
                    "gradient_band": bool(grad_ok),
                    "norm_distance_nonincreasing": bool(all(
                        d2 <= d1 + 1e-12 for d1, d2 in zip(dists, dists[1:]))),
                    "statistics_reliable": bool(np.all(tab.reliable))}
    return res


def moment_bounds(cfg):
    res = Result()
    stage = _Stages(res)
    b, levels, seq, tab = _moment_table(cfg, res, stage, with_conv=False)
    t = Table("moment_bounds.csv", [("n", "int"), ("p_exp", "float"), ("grad_mean", "float"),
                                    ("grad_se", "float"), ("reliable", "bool"),
                                    ("min_paths", "int")])
    for i, n in enumerate(levels):
        for k, p in enumerate(tab.p_exp):
            t.rows.append({"n": n, "p_exp": p, "grad_mean": float(tab.grad_mean[i, k]),
                           "grad_se": float(tab.grad_se[i, k]), "reliable": bool(tab.reliable[i]),
                           "min_paths": int(tab.min_paths[i])})
    p = float(cfg.option("norm_p", 4.0))
    q = float(cfg.option("norm_q", 4.0))
    with stage("integrability"):
        spec = MixedNormSpec(p, q, cfg.T, cfg.d)
        kr = krylov_rockner_check(spec)
        nt = Table("drift_norms.csv", [("n", "int"), ("norm", "float"), ("error", "float")])
        for n, bn in zip(levels, seq):
            mn = mixed_norm(bn, spec, resolution=1600 if cfg.d == 1 else 200)
            nt.rows.append({"n": n, "norm": mn.value, "error": mn.error})
    res.tables += [t, nt]
    res.details = {"p": p, "q": q, "slack": kr.slack}
    res.verdicts = {"krylov_rockner_admissible": bool(kr.admissible),
                    "gradient_moments_finite": bool(np.all(np.isfinite(tab.grad_mean))),
                    "gradient_band": bool(all(_band(tab.grad_mean[:, k], tab.grad_se[:, k])
                                              for k in range(len(tab.p_exp)))),
                    "statistics_reliable": bool(np.all(tab.reliable))}
    return res


# -- zvonkin_verify ----------------------------------------------------------

def fitted_order(dts, values):
    """Least-squares slope of log2(value) against log2(dt)."""
    return float(np.polyfit(np.log2(dts), np.log2(values), 1)[0])


def zvonkin_verify(cfg):
    res = Result()
    stage = _Stages(res)
    T = float(cfg.option("conj_T", 0.5))
    L = float(cfg.option("pde_half_width", 3.0))
    N = int(cfg.option("pde_points", 2401))
    pde_dt = float(cfg.option("pde_dt", 1e-3))
    dts = sorted((float(x) for x in cfg.option("conj_dts", [0.02, 0.01, 0.005])), reverse=True)
    n_conj = int(cfg.option("conj_mollify", 8))
    min_order = float(cfg.option("min_order", 0.4))
    x0 = np.asarray(cfg.option("conj_points", [0.0]), dtype=float).reshape(-1, cfg.d)
    with stage("setup"):
        b = build_drift(cfg, half_width=L, T=T)
        bn = mollify_drift(b, n_conj)
        spec = PDEGridSpec(SpatialGrid.box(L, N, cfg.d), pde_dt, T)
    sweep_tab = Table("sweep.csv", [("drift", "str"), ("lam", "float"), ("sup_grad", "float"),
                                    ("within_bound", "bool"), ("error", "str")])
    with stage("sweep"):
        sw_raw = gradient_bound_sweep(b, cfg.lambdas, spec)
        sw = gradient_bound_sweep(bn, cfg.lambdas, spec, keep_solutions=True)
    for name, table in (("truncated", sw_raw), (f"mollified_{n_conj}", sw)):
        for r in table.rows:
            sweep_tab.rows.append({"drift": name, **r._asdict()})
    verdicts = {"lambda_star_found": sw_raw.lam_star is not None and sw.lam_star is not None,
                "sweep_monotone": bool(sw_raw.monotone and sw.monotone)}
    details = {"lambda_star_truncated": sw_raw.lam_star, "lambda_star_mollified": sw.lam_star}
    with stage("ode_reduction"):
        c = 1.0 if cfg.d == 1 else (1.0, 0.5)
        cd = constant_drift(c, d=cfg.d, half_width=2.0, T=T)
        per = PDEGridSpec(SpatialGrid.box(2.0, 32, cfg.d, periodic=True), pde_dt, T)
        lam0 = float(cfg.lambdas[0])
        csol = solve_backward_pde(cd, lam0, per)
        cvec = np.broadcast_to(np.asarray(c, float), (cfg.d,))
        exact = (cvec[None, :] * (1 - np.exp(-lam0 * (T - csol.times)))[:, None] / lam0)
        got = csol.U.reshape(len(csol.times), -1, cfg.d)
        rel = float(np.abs(got - exact[:, None, :]).max() / np.abs(exact).max())
    details["ode_relative_error"] = rel
    verdicts["ode_reduction"] = rel <= 1e-3
    conj_tab = Table("conjugacy.csv", [("drift", "str"), ("reading", "str"), ("dt", "float"),
                                       ("residual", "float"),
                                       ("mean_residual", "float"), ("n_excluded", "int")])
    qv_tab = Table("quadratic_variation.csv", [("n", "int"), ("mean", "float"), ("se", "float"),
                                               ("max", "float"), ("n_excluded", "int")])
    if sw.lam_star is None:
        res.warnings.append("no lambda in the sweep satisfies sup|grad U| <= 1/2; "
                            "conjugacy and quadratic-variation stages skipped")
        verdicts.update({"gamma_roundtrip": False, "conjugacy_order": False,
                         "qv_stable": False})
    else:
        lam = sw.lam_star
        sol = sw.solutions[lam]
        with stage("gamma"):
            y = sol.grid.points
            worst = 0.0
            for t in (0.0, 0.5 * T):
                x = gamma_invert(sol, t, y)
                worst = max(worst, float(np.abs(gamma_apply(sol, t, x) - y).max()))
            inv_grad = inverse_gradient_bound(sol, 0.0, y[:: max(1, len(y) // 400)])
        details.update({"gamma_roundtrip": worst, "inverse_gradient": inv_grad})
        verdicts["gamma_roundtrip"] = worst <= 1e-8 and inv_grad <= 2 + 1e-6
        with stage("conjugacy"):
            M = int(cfg.option("conj_paths", 1000))
            noise = sample_noise(cfg.seed, M, cfg.d, dts[-1], T)
            orders = {}
            cases = [("mollified", bn, sol)]
            cper = PDEGridSpec(SpatialGrid.box(L, 64, cfg.d, periodic=True), pde_dt, T)
            cases.append(("constant", constant_drift(c, d=cfg.d, half_width=L, T=T),
                          solve_backward_pde(constant_drift(c, d=cfg.d, half_width=L, T=T),
                                             lam, cper)))
            printed = {}
            for name, drift, s in cases:
                for reading in ("ito", "printed"):
                    vals = []
                    for dt in dts:
                        r = conjugacy_residual(drift, s, x0,
                                               noise.coarsen(int(round(dt / dts[-1]))),
                                               reading=reading, threads=cfg.threads)
                        vals.append(r.residual)
                        conj_tab.rows.append({"drift": name, "reading": reading, "dt": dt,
                                              "residual": r.residual,
                                              "mean_residual": r.mean_residual,
                                              "n_excluded": r.n_excluded})
                    if reading == "ito":
                        orders[name] = fitted_order(dts, vals)
                    else:
                        printed[name] = vals[-1]
        details["conjugacy_orders"] = orders
        # the frozen-point reading is recorded for comparison; it is not a verdict
        details["printed_reading_finest_residual"] = printed
        verdicts["conjugacy_order"] = all(o >= min_order for o in orders.values())
        with stage("quadratic_variation"):
            Mq = int(cfg.option("qv_paths", 200))
            qnoise = sample_noise(cfg.seed, Mq, cfg.d, pde_dt, T)
            means, ses = [], []
            for n in cfg.mollify:
                bq = mollify_drift(b, int(n))
                sq = solve_backward_pde(bq, lam, spec)
                fl = integrate_flow(bq, 1.0, x0, qnoise, "forward", threads=cfg.threads)
                qv = quadratic_variation_estimate(sq, fl, float(cfg.option("qv_constant", 1.0)))
                qv_tab.rows.append({"n": int(n), "mean": qv.mean, "se": qv.se, "max": qv.max,
                                    "n_excluded": qv.n_excluded})
                means.append(qv.mean)
                ses.append(qv.se)
        verdicts["qv_stable"] = _doubling_stable(means, ses)
        with stage("export"):
            res.details["solution_dir"] = "zvonkin_solution"
            res.extra_files.append(("zvonkin_solution", lambda d, s=sol: save_solution(
                s, d, time_stride=max(1, len(s.times) // 10))))
    res.tables += [sweep_tab, conj_tab, qv_tab]
    res.details.update(details)
    res.verdicts = {k: bool(v) for k, v in verdicts.items()}
    return res


# -- weak_residual -----------------------------------------------------------

def weak_residual(cfg):
    res = Result()
    stage = _Stages(res)
    levels = int(cfg.option("levels", 3))
    min_order = cfg.option("min_order", None)
    with stage("setup"):
        b = build_drift(cfg)
        u0 = build_u0(cfg)
        chi_spec = InitialConditionSpec("compact-bump", {"width": float(cfg.option("test_width", 1.0)),
                                                         "center": float(cfg.option("test_center", 0.0))},
                                        cfg.d)
        finest = cfg.dt / 2 ** (levels - 1)
        noise = sample_noise(cfg.seed, cfg.paths, cfg.d, finest, cfg.T)
        res.warnings += list(noise.warnings)
    tab = Table("weak_residual.csv", [("level", "int"), ("dt", "float"), ("h", "float"),
                                      ("median", "float"), ("q90", "float"), ("mean", "float")])
    meds, dts = [], []
    for lev in range(levels):
        dt = cfg.dt / 2 ** lev
        pts = (cfg.points - 1) * 2 ** lev + 1
        with stage(f"level{lev}"):
            grid = build_grid(cfg, pts)
            nz = noise.coarsen(2 ** (levels - 1 - lev))
            u = representation_series(u0, b, cfg.sigma, grid, nz, threads=cfg.threads)
            chi = ScalarFieldGrid.from_function(grid, chi_spec, "test function")
            r = weak_form_residual(u, b, cfg.sigma, u0, chi, nz)
        tab.rows.append({"level": lev, "dt": dt, "h": grid.spacing[0],
                         "median": float(np.median(r)), "q90": float(np.quantile(r, 0.9)),
                         "mean": float(np.mean(r))})
        meds.append(float(np.median(r)))
        dts.append(dt)
    res.tables.append(tab)
    res.verdicts["median_decreasing"] = bool(all(m2 < m1 for m1, m2 in zip(meds, meds[1:])))
    order = fitted_order(dts, meds)
    res.details["fitted_order"] = order
    if min_order is not None:
        res.verdicts["fitted_order"] = bool(order >= float(min_order))
    return res


PIPELINES = {
    "shock_demo": shock_demo,
    "mollify_convergence": mollify_convergence,
    "zvonkin_verify": zvonkin_verify,
    "moment_bounds": moment_bounds,
    "weak_residual": weak_residual,
}

EXPERIMENT_DESCRIPTIONS = {
    "shock_demo": "Hoelder/Sobolev time series with and without noise for the coalescing drift",
    "mollify_convergence": "flow moments over n-doubling mollified drifts",
    "zvonkin_verify": "PDE solve, lambda sweep, conjugacy residual, quadratic variation",
    "moment_bounds": "gradient-moment tables and the integrability check",
    "weak_residual": "refinement study of the Ito weak-form residual",
}


def get_pipeline(name):
    if name not in PIPELINES:
        raise UnknownExperimentError(f"unknown experiment {name!r}; expected one of "
                                     f"{sorted(PIPELINES)}")
    return PIPELINES[name]
