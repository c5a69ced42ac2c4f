"""One test per acceptance criterion, at the stated tolerances and runtime budgets."""
import json
import math
import os
import time

import numpy as np
import pytest

from stochtransport.diagnostics import energy_envelope_check, interpolation_check
from stochtransport.drift import coalescing_drift, constant_drift, mollify_drift, zero_drift
from stochtransport.flow import (coalescence_metric, flow_moment_estimates, integrate_flow,
                                 invert_flow_residual, sample_noise)
from stochtransport.grids import SpatialGrid
from stochtransport.harness.config import load_config
from stochtransport.harness.experiments import (SHOCK_KAPPA, calibrate_shock_kappa,
                                                fitted_order, shock_demo, weak_residual)
from stochtransport.harness.report import run_experiment
from stochtransport.transport import InitialConditionSpec, ScalarFieldGrid, representation_series
from stochtransport.zvonkin import (PDEGridSpec, conjugacy_residual, gradient_bound_sweep,
                                    solve_backward_pde)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
FIXTURES = os.path.join(ROOT, "tests", "fixtures")


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def test_criterion_01_zero_drift_exactness(record_criterion):
    with Timer() as tm:
        g = SpatialGrid.box(1.0, 21)
        nz = sample_noise(2026, 100, 1, 1e-3, 1.0)
        fl = integrate_flow(zero_drift(), 1.0, g, nz)
        err = np.abs(fl.X - (g.points[:, None, None, :] + nz.brownian()[None])).max()
        inv = invert_flow_residual(zero_drift(), 1.0, g, nz, 1.0)
    record_criterion(1, "zero-drift exactness",
                     f"max err {err:.1e}, inverse residual {inv.residual:.1e}, {tm.elapsed:.1f} s")
    assert not fl.escaped.any() and inv.n_excluded == 0
    assert err <= 1e-12
    assert inv.residual <= 1e-10
    assert tm.elapsed < 5


def test_criterion_02_deterministic_coalescence(record_criterion):
    with Timer() as tm:
        nz = sample_noise(0, 1, 1, 1e-4, 1.1)
        fl = integrate_flow(coalescing_drift(1.0), 0.0, np.array([[-0.25], [0.25]]), nz)
        t = fl.times
        x = fl.X[:, 0, :, 0]
        window = (t >= 0.98) & (t <= 1.02)
        gap = np.abs(x[0] - x[1])
        t_meet = t[np.argmax(gap < 2e-6)]
        meet = coalescence_metric(fl, threshold=2e-6)
    record_criterion(2, "deterministic coalescence",
                     f"meeting time {t_meet:.4f} (closed form 1.0), {tm.elapsed:.1f} s")
    assert np.all(np.abs(x[:, window]) < 1e-2)
    assert gap.min() < 2e-6 and abs(t_meet - 1.0) <= 0.02
    assert meet.fraction_below == 1.0
    assert tm.elapsed < 5


def test_shock_kappa_fixture_matches_code_constant():
    with open(os.path.join(FIXTURES, "shock_kappa.json")) as fh:
        fix = json.load(fh)
    assert fix["kappa"] == SHOCK_KAPPA
    assert fix["kappa"] == pytest.approx(fix["margin"] * max(fix["ratios"].values()))


def test_shock_kappa_calibration_reproduces():
    with open(os.path.join(FIXTURES, "shock_kappa.json")) as fh:
        fix = json.load(fh)
    again = calibrate_shock_kappa(load_config(os.path.join(ROOT, fix["config"])),
                                  resolutions=[int(k) for k in fix["ratios"]],
                                  margin=fix["margin"])
    assert again["kappa"] == fix["kappa"]


def test_criterion_03_shock_formation_vs_prevention(record_criterion):
    with Timer() as tm:
        res = shock_demo(load_config(os.path.join(CONFIGS, "shock_demo.yaml")))
    det, noisy = res.details["sigma=0"], res.details["sigma=1"]
    record_criterion(3, "shock formation vs prevention",
                     f"sigma=0 ratio {det['ratio']:.1f} growth {det['grid_growth']:.2f}; "
                     f"sigma=1 ratio {noisy['ratio']:.2f} <= kappa {SHOCK_KAPPA:.2f}; "
                     f"{tm.elapsed:.0f} s")
    assert res.details["kappa"] == SHOCK_KAPPA
    assert det["ratio"] >= 10 and det["grid_growth"] >= 1.5
    assert noisy["ratio"] <= SHOCK_KAPPA and noisy["grid_growth"] < 1.5
    assert res.verdicts == {"deterministic_jump": True, "noisy_bounded": True,
                            "holder_finite": True}
    assert tm.elapsed < 180


def test_criterion_04_zvonkin_gradient_bound(record_criterion):
    with Timer() as tm:
        T = 0.5
        b = coalescing_drift(1.0, half_width=3.0, T=T)
        spec = PDEGridSpec(SpatialGrid.box(3.0, 2401), 1e-3, T)
        sw = gradient_bound_sweep(b, [1.0, 2.0, 4.0, 8.0, 16.0], spec)
        lam = 2.0
        per = PDEGridSpec(SpatialGrid.box(2.0, 32, periodic=True), 1e-3, T)
        sol = solve_backward_pde(constant_drift(1.0, T=T), lam, per)
        exact = (1 - np.exp(-lam * (T - sol.times))) / lam
        rel = np.abs(sol.U[..., 0] - exact[:, None]).max() / np.abs(exact).max()
    record_criterion(4, "Zvonkin gradient bound",
                     f"lambda* = {sw.lam_star}, sup|grad U| = "
                     f"{[round(r.sup_grad, 3) for r in sw.rows]}, ODE rel err {rel:.1e}, "
                     f"{tm.elapsed:.0f} s")
    assert sw.lam_star is not None
    assert sw.monotone
    assert rel <= 1e-3
    assert tm.elapsed < 60


def test_criterion_05_conjugacy_order(record_criterion):
    with Timer() as tm:
        T, L, lam = 0.5, 3.0, None
        dts = [0.02, 0.01, 0.005]
        bn = mollify_drift(coalescing_drift(1.0, half_width=L, T=T), 8)
        spec = PDEGridSpec(SpatialGrid.box(L, 2401), 1e-3, T)
        sw = gradient_bound_sweep(bn, [1.0, 2.0, 4.0, 8.0, 16.0], spec, keep_solutions=True)
        lam = sw.lam_star
        cb = constant_drift(1.0, half_width=L, T=T)
        csol = solve_backward_pde(cb, lam, PDEGridSpec(SpatialGrid.box(L, 64, periodic=True),
                                                       1e-3, T))
        noise = sample_noise(2026, 1000, 1, dts[-1], T)
        orders, values = {}, {}
        for name, drift, sol in (("constant", cb, csol), ("mollified", bn, sw.solutions[lam])):
            vals = [conjugacy_residual(drift, sol, np.zeros((1, 1)),
                                       noise.coarsen(round(dt / dts[-1]))).residual
                    for dt in dts]
            values[name] = vals
            orders[name] = fitted_order(dts, vals)
    record_criterion(5, "conjugacy residual order",
                     f"orders {', '.join(f'{k} {v:.2f}' for k, v in orders.items())}, "
                     f"{tm.elapsed:.0f} s")
    for name, vals in values.items():
        assert vals[0] > vals[1] > vals[2], name
        assert orders[name] >= 0.4, name
    assert tm.elapsed < 120


def test_criterion_06_flow_statistics(record_criterion):
    with Timer() as tm:
        b = coalescing_drift(1.0)
        seq = [mollify_drift(b, n) for n in (4, 8, 16)]
        noise = sample_noise(2026, 200, 1, 1e-3, 2.0)
        tab = flow_moment_estimates(seq, 1.0, np.linspace(-1, 1, 9)[:, None], noise, [2.0, 4.0],
                                    reference=b, record=10, labels=(4, 8, 16))
    record_criterion(6, "flow statistics over mollification levels",
                     f"conv p=2 {np.round(tab.conv_mean[:, 0], 6).tolist()}, grad p=2 "
                     f"{np.round(tab.grad_mean[:, 0], 1).tolist()}, {tm.elapsed:.0f} s")
    assert np.all(tab.reliable)
    for k in range(2):
        m, s = tab.conv_mean[:, k], tab.conv_se[:, k]
        for i in range(2):
            assert m[i + 1] <= m[i] + 2 * math.hypot(s[i], s[i + 1])
        g, gs = tab.grad_mean[:, k], tab.grad_se[:, k]
        for i in range(3):
            for j in range(i + 1, 3):
                assert abs(g[i] - g[j]) <= 2 * math.hypot(gs[i], gs[j])
    assert tm.elapsed < 180


def test_criterion_07_weak_form_residual(record_criterion):
    with Timer() as tm:
        zero = weak_residual(load_config(os.path.join(CONFIGS, "weak_residual.yaml")))
        const = weak_residual(load_config(os.path.join(CONFIGS, "weak_residual_constant.yaml")))
    meds = [r["median"] for r in zero.tables[0].rows]
    record_criterion(7, "weak-form residual refinement",
                     f"b=0 medians {[f'{m:.4f}' for m in meds]}, constant-drift order "
                     f"{const.details['fitted_order']:.2f}, {tm.elapsed:.0f} s")
    assert len(meds) == 3 and meds[0] > meds[1] > meds[2]
    assert zero.tables[0].rows[0]["dt"] == 0.01
    assert const.details["fitted_order"] >= 1.0
    assert tm.elapsed < 120


def _random_fields(n, rng_seed=2026, k=1000):
    rng = np.random.default_rng(rng_seed)
    c = rng.uniform(-1.5, 1.5, (k, 3))
    w = rng.uniform(0.2, 0.6, (k, 3))
    a = rng.uniform(0.1, 1.0, (k, 3))
    g = SpatialGrid.box(4.0, n)
    x = g.axes[0]
    v = np.sum(a[:, :, None] * np.exp(-((x[None, None] - c[:, :, None]) / w[:, :, None]) ** 2),
               axis=1)
    return ScalarFieldGrid(g, v)


def test_criterion_08_interpolation_inequality(record_criterion):
    with Timer() as tm:
        coarse, fine = _random_fields(401), _random_fields(801)
        r = interpolation_check(coarse, 4.0)
        scaled = interpolation_check(coarse.scaled(123.456), 4.0)
        r2 = interpolation_check(fine, 4.0)
        scale_dev = np.abs(scaled / r - 1).max()
        grid_dev = np.abs(r2 / r - 1).max()
    record_criterion(8, "interpolation inequality checker",
                     f"ratio in [{r.min():.3f}, {r.max():.3f}], scale dev {scale_dev:.1e}, "
                     f"grid dev {grid_dev:.1e}, {tm.elapsed:.1f} s")
    assert r.shape == (1000,)
    assert np.all(np.isfinite(r)) and np.all(r > 0)
    assert scale_dev <= 1e-10
    assert grid_dev <= 0.05
    assert tm.elapsed < 60


def test_criterion_09_energy_envelope(record_criterion):
    with Timer() as tm:
        T = 0.5
        g = SpatialGrid.box(2.0, 201)
        u0 = InitialConditionSpec("asymmetric-smooth")
        b = mollify_drift(coalescing_drift(1.0, T=T), 8)
        fine = sample_noise(2026, 100, 1, 0.005, T)
        coarse = fine.coarsen(2)
        ua = representation_series(u0, b, 1.0, g, coarse)
        same = energy_envelope_check(ua, ua, b, 4.0, 1, coarse, coarse)
        full = representation_series(u0, b, 1.0, g, fine, steps=range(0, fine.n_steps + 1, 2))
        ub = ScalarFieldGrid(g, full.values, "u", full.mask, times=full.times)
        env = energy_envelope_check(ua, ub, b, 4.0, 1, coarse, fine)
    record_criterion(9, "energy envelope",
                     f"identical D max {same.D.max():.1e}; dt pair max D/envelope "
                     f"{np.max(env.D / np.maximum(env.envelope, 1e-300)):.3f}, C = {env.C:.1f}, "
                     f"{tm.elapsed:.0f} s")
    assert np.all(same.D == 0.0) and same.passed
    assert not env.tracking_only
    assert env.passed
    assert tm.elapsed < 120


def test_criterion_10_determinism_across_threads(record_criterion, tmp_path):
    import dataclasses
    with Timer() as tm:
        cfg = load_config(os.path.join(CONFIGS, "shock_demo.yaml"))
        one = run_experiment(dataclasses.replace(cfg, threads=1), output_dir=str(tmp_path / "1"))
        many = run_experiment(dataclasses.replace(cfg, threads=4), output_dir=str(tmp_path / "4"))
    record_criterion(10, "determinism across thread counts",
                     f"{len(one.outputs)} files digest-identical, {tm.elapsed:.0f} s")
    assert one.outputs == many.outputs
    assert one.config_hash == many.config_hash
    assert tm.elapsed < 360
