"""Regularity diagnostics: Hoelder constants, W^{1,r} norms, interpolation ratio, energy envelope."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .drift import _midpoint_nodes
from .errors import ContractError, DomainError, ResolutionError
from .grids import central_gradient
from .transport import ScalarFieldGrid

BRUTE_FORCE_LIMIT = 2000
DEFAULT_PAIRS = 2_000_000


def _region_mask(field, region):
    """Boolean spatial mask for ``region``: None, a box ((lo...), (hi...)) or a mask array."""
    grid = field.grid
    if region is None:
        return np.ones(grid.shape, dtype=bool)
    if isinstance(region, np.ndarray) and region.dtype == bool:
        if region.shape != grid.shape:
            raise DomainError("region mask must match the grid shape")
        return region
    lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (grid.d,)) for v in region)
    eps = 1e-12 * max(1.0, float(np.max(np.abs(grid.hi))))
    return np.all((grid.mesh >= lo - eps) & (grid.mesh <= hi + eps), axis=-1)


def _batches(field):
    """Yield (batch_index, values, valid) over the leading batch axes."""
    vals = field.values.reshape((-1,) + field.grid.shape)
    valid = field.valid().reshape((-1,) + field.grid.shape)
    for k in range(vals.shape[0]):
        yield k, vals[k], valid[k]


@dataclass(frozen=True)
class HolderEstimate:
    value: np.ndarray
    pairs: int
    exhaustive: bool


def holder_estimate(field, alpha, region=None, max_pairs=DEFAULT_PAIRS, seed=0):
    """max |f(x) - f(y)| / |x - y|^alpha over grid pairs in the region, per batch entry.

    Exhaustive for at most 2000 region points; otherwise random pairs plus
    all nearest-neighbour pairs along each axis (those detect jumps).
    """
    if not (0 < alpha <= 1):
        raise DomainError("Hoelder exponent must satisfy 0 < alpha <= 1")
    grid = field.grid
    rmask = _region_mask(field, region)
    pts_all = grid.mesh.reshape(-1, grid.d)
    out = np.zeros(int(np.prod(field.batch_shape, dtype=int)))
    npairs = 0
    exhaustive = True
    cache = {}
    for k, vals, valid in _batches(field):
        sel = (rmask & valid).ravel()
        n = int(sel.sum())
        if n == 0:
            raise DomainError("empty region: no unmasked grid points to compare")
        if n < 2:
            out[k] = 0.0
            continue
        f = vals.ravel()[sel]
        key = sel.tobytes()
        if n <= BRUTE_FORCE_LIMIT:
            if key not in cache:
                p = pts_all[sel]
                dist = np.sqrt(np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1))
                iu = np.triu_indices(n, 1)
                cache = {key: (iu, dist[iu] ** alpha)}
            iu, w = cache[key]
            ratio = np.abs(f[iu[0]] - f[iu[1]]) / w
            out[k] = float(ratio.max())
            npairs = max(npairs, len(w))
        else:
            exhaustive = False
            idx = np.flatnonzero(sel)
            rng = np.random.default_rng([seed, k])
            i = rng.integers(0, n, max_pairs)
            j = rng.integers(0, n, max_pairs)
            keep = i != j
            a, b = idx[i[keep]], idx[j[keep]]
            # nearest-neighbour pairs on the full grid, restricted to the selection
            lin = np.arange(grid.size).reshape(grid.shape)
            extra_a, extra_b = [], []
            for ax in range(grid.d):
                s0 = [slice(None)] * grid.d
                s1 = [slice(None)] * grid.d
                s0[ax] = slice(0, -1)
                s1[ax] = slice(1, None)
                extra_a.append(lin[tuple(s0)].ravel())
                extra_b.append(lin[tuple(s1)].ravel())
            ea, eb = np.concatenate(extra_a), np.concatenate(extra_b)
            ok = sel[ea] & sel[eb]
            a = np.concatenate([a, ea[ok]])
            b = np.concatenate([b, eb[ok]])
            dist = np.sqrt(np.sum((pts_all[a] - pts_all[b]) ** 2, axis=-1))
            fv = vals.ravel()
            out[k] = float(np.max(np.abs(fv[a] - fv[b]) / dist ** alpha))
            npairs = max(npairs, len(a))
    return HolderEstimate(out.reshape(field.batch_shape), npairs, exhaustive)


def holder_constant(field, alpha, region=None, **kw):
    """Hoelder constant C_alpha; a float for a single field, else an array per batch entry."""
    est = holder_estimate(field, alpha, region, **kw)
    return float(est.value) if est.value.ndim == 0 else est.value


@dataclass(frozen=True)
class SobolevNorm:
    lr: np.ndarray
    grad_lr: np.ndarray

    def __iter__(self):
        return iter((self.lr, self.grad_lr))


def sobolev_w1r_norm(field, r, region=None):
    """Midpoint-quadrature L^r norms of f and of its central-difference gradient."""
    if not r >= 1:
        raise DomainError("Sobolev exponent r must be >= 1")
    grid = field.grid
    rmask = _region_mask(field, region)
    for ax in range(grid.d):
        extent = np.any(rmask, axis=tuple(a for a in range(grid.d) if a != ax)).sum()
        if extent < 3:
            raise ResolutionError("region is smaller than one central-difference stencil")
    nb = len(field.batch_shape)
    vals = field.values
    grad = central_gradient(vals, grid, nbatch=nb)
    gmag = np.sqrt(np.sum(grad ** 2, axis=-1))
    use = rmask & field.valid()
    vol = grid.cell_volume
    axes = tuple(range(nb, nb + grid.d))

    def lr(a):
        a = np.where(use, np.abs(a), 0.0)
        if math.isinf(r):
            return a.max(axis=axes)
        return (np.sum(a ** r, axis=axes) * vol) ** (1.0 / r)

    return SobolevNorm(lr(vals), lr(gmag))


def interpolation_exponent(alpha, d):
    return (alpha - 2.0) * d / (2.0 * alpha)


def interpolation_check(v, alpha, d=None):
    """||v||_alpha / (||v||_2^(1-s) ||grad v||_2^s) with s = (alpha - 2) d / (2 alpha).

    Norm form of the interpolation inequality; homogeneous of degree 1 in v
    on both sides, so the ratio is scale invariant.
    """
    d = v.grid.d if d is None else d
    if not alpha > 2:
        raise DomainError("interpolation exponent alpha must exceed 2")
    s = interpolation_exponent(alpha, d)
    if not (0 < s < 1):
        raise DomainError(f"s = {s:g} is outside (0, 1); need alpha < 2d/(d-2) for d > 2")
    vals = v.values
    if np.any(vals[v.valid()] < 0):
        raise DomainError("interpolation check needs a nonnegative field")
    nb = len(v.batch_shape)
    axes = tuple(range(nb, nb + v.grid.d))
    use = v.valid()
    vol = v.grid.cell_volume
    a = np.where(use, vals, 0.0)
    l2 = np.sqrt(np.sum(a ** 2, axis=axes) * vol)
    if np.any(l2 == 0):
        raise DomainError("ratio undefined for the zero field")
    la = (np.sum(a ** alpha, axis=axes) * vol) ** (1.0 / alpha)
    grad = central_gradient(vals, v.grid, nbatch=nb)
    g2 = np.sqrt(np.sum(np.where(use[..., None], grad, 0.0) ** 2, axis=axes + (nb + v.grid.d,))
                  * vol)
    if np.any(g2 == 0):
        raise DomainError("ratio undefined for a field with zero gradient")
    ratio = la / (l2 ** (1 - s) * g2 ** s)
    return float(ratio) if np.ndim(ratio) == 0 else ratio


# -- energy envelope ---------------------------------------------------------

@dataclass(frozen=True)
class EnergyEnvelope:
    times: np.ndarray
    D: np.ndarray
    envelope: np.ndarray
    verdict: np.ndarray
    C: float
    D0: float
    integral: np.ndarray
    tracking_only: bool
    flags: tuple = ()

    @property
    def passed(self):
        return bool(np.all(self.verdict))

    def rows(self):
        return [{"t": float(t), "D": float(D), "envelope": float(E), "verdict": bool(v)}
                for t, D, E, v in zip(self.times, self.D, self.envelope, self.verdict)]


def _drift_power_integral(b, p, d, times, resolution=400):
    """I(t) = int_0^t (int |b|^p dx)^(2/(p-d)) ds at the given times (midpoint rules)."""
    times = np.asarray(times, dtype=float)
    if b.kind == "zero":
        return np.zeros_like(times)
    box = b.support_box()
    if box is None:
        raise DomainError("energy envelope needs a drift with finite support")
    pts, vol = _midpoint_nodes(box[0], box[1], resolution)
    expo = 2.0 / (p - d)

    def rate(t):
        mag = np.linalg.norm(b.evaluate(t, pts), axis=-1)
        return (np.sum(mag ** p) * vol) ** expo

    if b.autonomous:
        return rate(0.0) * times
    out = np.zeros_like(times)
    for i, t in enumerate(times):
        n = max(int(math.ceil(t / (b.T / resolution))), 1) if t > 0 else 0
        if n:
            s = (np.arange(n) + 0.5) * (t / n)
            out[i] = sum(rate(x) for x in s) * (t / n)
    return out


def energy_envelope_check(u_a, u_b, b, p, d, noise_a=None, noise_b=None, calibration=0.1,
                          rtol=1e-9):
    """D(t) = int (E[(u_a - u_b)^2])^2 dx against D(0+) exp(C I(t)).

    ``u_a``/``u_b`` have values (paths, times, *grid) at common times. C is
    the smallest constant that makes the envelope hold on the first
    ``calibration`` fraction of the horizon.
    """
    if not p > d:
        raise DomainError(f"need p > d so that 2/(p - d) > 0 (p = {p}, d = {d})")
    if noise_a is not None or noise_b is not None:
        if noise_a is None or noise_b is None or noise_a.root != noise_b.root:
            raise ContractError("u_a and u_b must be driven by the same noise ensemble "
                                "(seed, paths, dimension and base step)")
    if u_a.grid != u_b.grid or u_a.values.shape != u_b.values.shape:
        raise ContractError("fields must share grid, path count and time axis")
    if u_a.times is None or u_b.times is None or not np.allclose(u_a.times, u_b.times):
        raise ContractError("fields must be sampled at common times")
    times = np.asarray(u_a.times, dtype=float)
    valid = u_a.valid() & u_b.valid()
    diff2 = np.where(valid, (u_a.values - u_b.values) ** 2, 0.0)
    count = valid.sum(axis=0)
    vhat = diff2.sum(axis=0) / np.maximum(count, 1)  # (times, *grid)
    axes = tuple(range(1, 1 + u_a.grid.d))
    vol = u_a.grid.cell_volume
    D = np.sum(vhat ** 2, axis=axes) * vol
    scale = np.sum(np.mean(u_a.values ** 2, axis=0) ** 2, axis=axes).max() * vol
    # D is quartic in u_a - u_b, so rounding noise sits far below this floor
    atol = 1e-20 * max(scale, 1e-300)
    I = _drift_power_integral(b, p, d, times)
    flags = []
    tracking = bool(D[0] > atol)
    if tracking:
        flags.append("initial data differ (D(0) > 0): envelope tracking only")
        i0 = 0
    else:
        pos = np.flatnonzero(times > 0)
        i0 = int(pos[0]) if pos.size else 0
    D0 = float(D[i0])
    horizon = times[-1] - times[0]
    dI = I - I[i0]
    cal = (times > times[i0]) & (times <= times[0] + calibration * horizon) & (dI > 0)
    C = 0.0
    if D0 > atol and np.any(cal):
        C = float(max(0.0, np.max(np.log(np.maximum(D[cal], 1e-300) / D0) / dI[cal])))
    env = D0 * np.exp(C * dI)
    verdict = D <= env * (1 + rtol) + atol
    return EnergyEnvelope(times, D, env, verdict, C, D0, I, tracking, tuple(flags))


# -- reports -----------------------------------------------------------------

@dataclass
class RegularityReport:
    """Per-time, per-path Hoelder and W^{1,r} statistics with ensemble quantiles."""

    label: str
    times: np.ndarray
    alphas: tuple
    rs: tuple
    holder: dict
    sobolev: dict
    levels: tuple = (0.5, 0.9)
    metadata: dict = field(default_factory=dict)

    def quantile_rows(self):
        rows = []
        for a in self.alphas:
            H = self.holder[a]  # (times, paths)
            for ti, t in enumerate(self.times):
                for q in self.levels:
                    rows.append({"label": self.label, "stat": "holder", "param": a,
                                 "t": float(t), "quantile": q,
                                 "value": float(np.quantile(H[ti], q))})
        for r in self.rs:
            lr, gr = self.sobolev[r]
            for ti, t in enumerate(self.times):
                for q in self.levels:
                    rows.append({"label": self.label, "stat": "lr", "param": r, "t": float(t),
                                 "quantile": q, "value": float(np.quantile(lr[ti], q))})
                    rows.append({"label": self.label, "stat": "grad_lr", "param": r,
                                 "t": float(t), "quantile": q,
                                 "value": float(np.quantile(gr[ti], q))})
        return rows

    def summary(self):
        rows = self.quantile_rows()
        nonneg = all(r["value"] >= 0 for r in rows)
        return {"label": self.label, "times": [float(t) for t in self.times],
                "nonnegative": nonneg, "finite": all(math.isfinite(r["value"]) for r in rows),
                "metadata": self.metadata}

    def to_csv(self, path):
        rows = self.quantile_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def regularity_report(fields, alphas, rs, region=None, levels=(0.5, 0.9), label=""):
    """Build a report from a list of per-time ScalarFieldGrid (each with a path batch)."""
    times = np.array([float(f.times[0]) if f.times is not None else float(i)
                      for i, f in enumerate(fields)])
    holder = {a: np.stack([np.atleast_1d(holder_estimate(f, a, region).value) for f in fields])
              for a in alphas}
    sob = {}
    for r in rs:
        parts = [sobolev_w1r_norm(f, r, region) for f in fields]
        sob[r] = (np.stack([np.atleast_1d(p.lr) for p in parts]),
                  np.stack([np.atleast_1d(p.grad_lr) for p in parts]))
    return RegularityReport(label, times, tuple(alphas), tuple(rs), holder, sob, tuple(levels),
                            {"grid": fields[0].grid.to_dict()})


__all__ = ["HolderEstimate", "holder_estimate", "holder_constant", "SobolevNorm",
           "sobolev_w1r_norm", "interpolation_exponent", "interpolation_check",
           "EnergyEnvelope", "energy_envelope_check", "RegularityReport", "regularity_report",
           "ScalarFieldGrid"]
