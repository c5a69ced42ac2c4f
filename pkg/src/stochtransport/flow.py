"""Brownian noise ensembles and Euler-Maruyama flows of the characteristics SDE."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import DomainError, StepSizeError
from .grids import SpatialGrid

MIN_RELIABLE_PATHS = 30


# -- noise -------------------------------------------------------------------

def path_generator(seed, path):
    """Counter-based stream for one path; depends on (seed, path) only."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, path], dtype=np.uint64)))


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    """Brownian increments dW[path, step, dim] on the grid k * dt, k <= n_steps."""

    seed: int
    n_paths: int
    d: int
    dt: float
    T: float
    increments: np.ndarray
    warnings: tuple = ()
    root_dt: float = 0.0

    def __post_init__(self):
        if not self.root_dt:
            object.__setattr__(self, "root_dt", self.dt)
        self.increments.setflags(write=False)

    @property
    def n_steps(self):
        return self.increments.shape[1]

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def root(self):
        """Identity of the underlying Brownian sample (shared by coarsenings)."""
        return (self.seed, self.n_paths, self.d, self.root_dt)

    def brownian(self):
        """Partial sums W[path, k, dim] with W[:, 0] = 0."""
        W = np.zeros((self.n_paths, self.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W

    def coarsen(self, factor):
        """Same Brownian path on the grid with step factor * dt."""
        factor = int(factor)
        if factor < 1 or self.n_steps % factor:
            raise DomainError(f"coarsening factor {factor} must divide n_steps = {self.n_steps}")
        inc = self.increments.reshape(self.n_paths, self.n_steps // factor, factor, self.d)
        return NoiseEnsemble(self.seed, self.n_paths, self.d, self.dt * factor, self.T,
                             inc.sum(axis=2), self.warnings, self.root_dt)

    def subset(self, n_paths):
        """First ``n_paths`` paths (identical increments)."""
        return NoiseEnsemble(self.seed, n_paths, self.d, self.dt, self.T,
                             np.array(self.increments[:n_paths]), self.warnings, self.root_dt)

    def truncate(self, n_steps):
        """First ``n_steps`` increments, horizon n_steps * dt."""
        return NoiseEnsemble(self.seed, self.n_paths, self.d, self.dt, n_steps * self.dt,
                             np.array(self.increments[:, :n_steps]), self.warnings, self.root_dt)


def sample_noise(seed, M, d, dt, T):
    """Reproducible N(0, dt) increments; path m uses the stream keyed by (seed, m).

    A non-integer T/dt is rounded down to the largest full grid and a warning
    is recorded on the ensemble.
    """
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise DomainError("seed must be a non-negative integer")
    if M < 1 or d < 1:
        raise DomainError("need M >= 1 paths and d >= 1")
    if not (dt > 0 and T >= dt):
        raise DomainError("need dt > 0 and T >= dt")
    ratio = T / dt
    K = int(math.floor(ratio + 1e-9))
    warnings = ()
    if abs(ratio - K) > 1e-9 * max(1.0, ratio):
        warnings = (f"T/dt = {ratio:.6g} is not an integer; horizon truncated to {K * dt:.6g}",)
    sd = math.sqrt(dt)
    inc = np.empty((M, K, d))
    for m in range(M):
        inc[m] = path_generator(int(seed), m).standard_normal((K, d)) * sd
    return NoiseEnsemble(int(seed), int(M), int(d), float(dt), K * dt, inc, warnings)


# -- flows -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FlowEnsemble:
    """Trajectories X[point, path, record, dim] of one Euler-Maruyama run.

    ``steps`` are the recorded step indices; for backward runs step j is the
    state after j backward steps from ``horizon`` (model time horizon - j dt).
    """

    points: np.ndarray
    X: np.ndarray
    steps: np.ndarray
    escaped: np.ndarray
    exit_step: np.ndarray
    direction: str
    drift: object
    sigma: float
    dt: float
    horizon: float
    noise: NoiseEnsemble
    grid: Optional[SpatialGrid] = None
    stencil_h: Optional[float] = None
    base_count: int = 0
    warnings: tuple = field(default=())

    @property
    def times(self):
        """Model times of the recorded states."""
        if self.direction == "forward":
            return self.steps * self.dt
        return self.horizon - self.steps * self.dt

    @property
    def elapsed(self):
        return self.steps * self.dt

    @property
    def n_points(self):
        return self.X.shape[0]

    @property
    def n_paths(self):
        return self.X.shape[1]

    def final(self):
        """States at the last recorded step, shape (points, paths, d)."""
        return self.X[:, :, -1, :]

    def manifest(self):
        return {"seed": self.noise.seed, "dt": self.dt, "n_steps": int(self.steps[-1]),
                "horizon": self.horizon, "direction": self.direction,
                "drift": getattr(self.drift, "name", type(self.drift).__name__),
                "sigma": self.sigma, "n_points": int(self.n_points),
                "n_paths": int(self.n_paths), "escapes": int(self.escaped.sum()),
                "warnings": list(self.warnings) + list(self.noise.warnings)}


def _as_points(grid, d):
    if isinstance(grid, SpatialGrid):
        return grid.points, grid
    pts = np.atleast_2d(np.asarray(grid, dtype=float))
    if pts.shape[-1] != d:
        pts = pts.reshape(-1, d)
    return pts, None


def stencil_grid(points, h, scale=1.0):
    """Points followed by their +-h neighbours: [x, x+h e_1, x-h e_1, x+h e_2, ...]."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    _check_step(h, scale)
    blocks = [pts]
    for j in range(pts.shape[1]):
        e = np.zeros(pts.shape[1])
        e[j] = h
        blocks += [pts + e, pts - e]
    return np.concatenate(blocks, axis=0)


def _check_step(h, scale):
    floor = 10.0 * np.finfo(float).eps * scale
    if not h >= floor:
        raise StepSizeError(f"finite-difference step h = {h:g} is below 10*eps*scale = {floor:g}")


def _em_chunk(drift, sigma, x0, dW, dt, t_of_step, sign, record, box):
    """Euler-Maruyama on one block of paths. x0: (G, m, d), dW: (m, k, d)."""
    G, m, d = x0.shape
    k = dW.shape[1]
    out = np.empty((G, m, len(record), d))
    x = x0.copy()
    escaped = np.zeros((G, m), dtype=bool)
    exit_step = np.full((G, m), -1, dtype=np.int64)
    slot = {s: i for i, s in enumerate(record)}
    if 0 in slot:
        out[:, :, slot[0]] = x
    for j in range(k):
        step = x + sign * drift.evaluate(t_of_step(j), x) * dt + sign * sigma * dW[None, :, j, :]
        live = ~escaped
        x = np.where(live[..., None], step, x)
        out_now = live & np.any(np.abs(x) > box, axis=-1)
        if out_now.any():
            escaped |= out_now
            exit_step[out_now] = j + 1
        if j + 1 in slot:
            out[:, :, slot[j + 1]] = x
    return out, escaped, exit_step


def _run_em(drift, sigma, x0, dW, dt, t_of_step, sign, record, box, threads):
    M = dW.shape[0]
    threads = max(1, min(int(threads), M))
    bounds = np.linspace(0, M, threads + 1).astype(int)
    jobs = [(bounds[i], bounds[i + 1]) for i in range(threads) if bounds[i + 1] > bounds[i]]

    def work(span):
        a, b = span
        return _em_chunk(drift, sigma, x0[:, a:b], dW[a:b], dt, t_of_step, sign, record, box)

    if len(jobs) == 1:
        parts = [work(jobs[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            parts = list(pool.map(work, jobs))
    X = np.concatenate([p[0] for p in parts], axis=1)
    esc = np.concatenate([p[1] for p in parts], axis=1)
    ex = np.concatenate([p[2] for p in parts], axis=1)
    return X, esc, ex


def _record_steps(record, k):
    if record is None or record == "all":
        return list(range(k + 1))
    if record == "end":
        return sorted({0, k})
    if isinstance(record, int):
        return sorted(set(range(0, k + 1, record)) | {k})
    steps = sorted({int(s) for s in record} | {0})
    if steps[-1] > k or steps[0] < 0:
        raise DomainError("recorded steps must lie in [0, n_steps]")
    return steps


def integrate_flow(b, sigma, grid, noise, direction="forward", horizon=None, record=None,
                   safety=4.0, threads=1, stencil_h=None, initial=None):
    """Euler-Maruyama flow of dX = b dt + sigma dW from every grid point.

    ``direction="backward"`` integrates the drift -b from ``horizon`` down to
    0 with the increments taken in reversed order and reflected, giving the
    inverse flow; the drift is evaluated at the reflected times
    horizon - j dt. ``record`` selects stored steps: None/"all", "end", an
    int stride, or an explicit list. Trajectories leaving the box
    ``|x|_inf <= safety * L`` are frozen and flagged as escaped.
    ``initial`` optionally gives per-path start states (points, paths, d).
    """
    if direction not in ("forward", "backward"):
        raise DomainError("direction must be 'forward' or 'backward'")
    if noise.d != b.d:
        raise DomainError(f"noise dimension {noise.d} does not match drift dimension {b.d}")
    L = float(getattr(b, "half_width", 2.0))
    pts, sgrid = _as_points(grid, b.d)
    base_count = pts.shape[0]
    if stencil_h is not None:
        pts = stencil_grid(pts, stencil_h, scale=L)
    if initial is None and np.any(np.abs(pts) > L * (1 + 1e-12)):
        raise DomainError(f"grid points must lie inside the domain box [-{L}, {L}]^d")
    if horizon is None:
        k = noise.n_steps
    else:
        ratio = horizon / noise.dt
        k = int(round(ratio))
        if abs(ratio - k) > 1e-8 * max(1.0, ratio) or k > noise.n_steps or k < 0:
            raise DomainError(f"horizon {horizon} is not on the noise time grid")
    horizon = k * noise.dt
    dt = noise.dt
    record = _record_steps(record, k)
    if direction == "forward":
        dW = noise.increments[:, :k]
        t_of_step = lambda j: j * dt  # noqa: E731
        sign = 1.0
    else:
        dW = noise.increments[:, :k][:, ::-1]
        t_of_step = lambda j: horizon - j * dt  # noqa: E731
        sign = -1.0
    if initial is None:
        x0 = np.broadcast_to(pts[:, None, :], (pts.shape[0], noise.n_paths, b.d))
    else:
        x0 = np.asarray(initial, dtype=float)
    X, esc, ex = _run_em(b, float(sigma), np.ascontiguousarray(x0), np.ascontiguousarray(dW), dt,
                         t_of_step, sign, record, safety * L, threads)
    warnings = ()
    if esc.any():
        warnings = (f"{int(esc.sum())} of {esc.size} trajectories escaped the safety box",)
    return FlowEnsemble(points=pts, X=X, steps=np.asarray(record), escaped=esc, exit_step=ex,
                        direction=direction, drift=b, sigma=float(sigma), dt=dt,
                        horizon=horizon, noise=noise,
                        grid=sgrid if stencil_h is None else None, stencil_h=stencil_h,
                        base_count=base_count, warnings=warnings)


class InverseResidual(NamedTuple):
    residual: float
    n_excluded: int


def invert_flow_residual(b, sigma, grid, noise, t, threads=1):
    """max over points and paths of |phi_0^t(phi_t(x)) - x| under common noise."""
    fwd = integrate_flow(b, sigma, grid, noise, "forward", horizon=t, record="end",
                         threads=threads)
    bwd = integrate_flow(b, sigma, fwd.points, noise, "backward", horizon=t, record="end",
                         threads=threads, initial=fwd.final())
    bad = fwd.escaped | bwd.escaped
    err = np.linalg.norm(bwd.final() - fwd.points[:, None, :], axis=-1)
    err = np.where(bad, 0.0, err)
    return InverseResidual(float(err.max()) if err.size else 0.0, int(bad.sum()))


def flow_gradient_fd(flow, h=None):
    """Central differences of trajectories with respect to the initial point.

    Returns grad[point, path, record, i, j] = d phi_i / d x_j for the base
    points of a stencil run; entries touching an escaped stencil cell are NaN.
    """
    if flow.stencil_h is None:
        raise DomainError("flow was not integrated on a stencil grid (pass stencil_h)")
    h = flow.stencil_h if h is None else h
    _check_step(h, float(getattr(flow.drift, "half_width", 1.0)))
    if not math.isclose(h, flow.stencil_h, rel_tol=1e-12):
        raise DomainError(f"h = {h} does not match the stencil spacing {flow.stencil_h}")
    G = flow.base_count
    d = flow.X.shape[-1]
    grad = np.empty(flow.X[:G].shape + (d,))
    bad = flow.escaped[:G].copy()
    for j in range(d):
        plus = slice(G * (1 + 2 * j), G * (2 + 2 * j))
        minus = slice(G * (2 + 2 * j), G * (3 + 2 * j))
        grad[..., :, j] = (flow.X[plus] - flow.X[minus]) / (2 * h)
        bad |= flow.escaped[plus] | flow.escaped[minus]
    grad[bad] = np.nan
    return grad


# -- statistics --------------------------------------------------------------

@dataclass(frozen=True)
class MomentTable:
    """sup over (t, x) of Monte-Carlo moments, one row per drift level.

    Arrays have shape (levels, len(p_exp)); ``*_se`` are standard errors at
    the maximizing cell. The sup is a grid max, hence a lower bound.
    """

    labels: tuple
    p_exp: tuple
    conv_mean: np.ndarray
    conv_se: np.ndarray
    grad_mean: np.ndarray
    grad_se: np.ndarray
    reliable: np.ndarray
    min_paths: np.ndarray
    warnings: tuple = ()

    def rows(self):
        out = []
        for i, lab in enumerate(self.labels):
            for k, p in enumerate(self.p_exp):
                out.append({"level": lab, "p_exp": p,
                            "conv_mean": float(self.conv_mean[i, k]),
                            "conv_se": float(self.conv_se[i, k]),
                            "grad_mean": float(self.grad_mean[i, k]),
                            "grad_se": float(self.grad_se[i, k]),
                            "reliable": bool(self.reliable[i]),
                            "min_paths": int(self.min_paths[i])})
        return out


def _sup_mean(values, valid):
    """values, valid: (G, M, R). Max over (G, R) of path means, with its SE."""
    n = valid.sum(axis=1)
    v = np.where(valid, values, 0.0)
    mean = v.sum(axis=1) / np.maximum(n, 1)
    sq = np.where(valid, (values - mean[:, None, :]) ** 2, 0.0).sum(axis=1)
    se = np.sqrt(sq / np.maximum(n - 1, 1) / np.maximum(n, 1))
    mean = np.where(n > 0, mean, -np.inf)
    idx = np.unravel_index(np.argmax(mean), mean.shape)
    return float(mean[idx]), float(se[idx])


def flow_moment_estimates(b_sequence, sigma, grid, noise, p_exp=2.0, reference=None, h=None,
                          record=10, labels=None, threads=1):
    """Moment table for a sequence of drifts under common noise.

    Each drift is run backward from the noise horizon; for time-homogeneous
    drifts, step j of that run has the law of the inverse flow at time j dt,
    so one run covers every t. The convergence column compares against
    ``reference`` (default: the last drift in the sequence).
    """
    b_sequence = list(b_sequence)
    if not b_sequence:
        raise DomainError("b_sequence must not be empty")
    ps = tuple(float(p) for p in np.atleast_1d(p_exp))
    L = float(getattr(b_sequence[0], "half_width", 2.0))
    h = 1e-3 * L if h is None else h
    ref_drift = b_sequence[-1] if reference is None else reference

    def run(bd):
        return integrate_flow(bd, sigma, grid, noise, "backward", record=record,
                              threads=threads, stencil_h=h)

    ref = run(ref_drift)
    G = ref.base_count
    ref_x = ref.X[:G]
    shape = (len(b_sequence), len(ps))
    conv_mean, conv_se = np.zeros(shape), np.zeros(shape)
    grad_mean, grad_se = np.zeros(shape), np.zeros(shape)
    reliable = np.ones(len(b_sequence), dtype=bool)
    min_paths = np.zeros(len(b_sequence), dtype=int)
    warnings = []
    labels = tuple(labels) if labels is not None else tuple(
        getattr(bd, "name", str(i)) for i, bd in enumerate(b_sequence))
    for i, bd in enumerate(b_sequence):
        fl = ref if bd is ref_drift else run(bd)
        grad = flow_gradient_fd(fl)
        R = fl.X.shape[2]
        ok_grad = np.all(np.isfinite(grad), axis=(-1, -2))
        ok_conv = np.broadcast_to((~(fl.escaped[:G] | ref.escaped[:G]))[..., None],
                                  (G, fl.n_paths, R))
        dist = np.linalg.norm(fl.X[:G] - ref_x, axis=-1)
        frob = np.sqrt(np.nansum(grad ** 2, axis=(-1, -2)))
        npaths = int(min(ok_grad.sum(axis=1).min(), ok_conv.sum(axis=1).min()))
        min_paths[i] = npaths
        if npaths < MIN_RELIABLE_PATHS:
            reliable[i] = False
            warnings.append(f"level {labels[i]}: only {npaths} unescaped paths in some cell "
                            f"(< {MIN_RELIABLE_PATHS}); statistic unreliable")
        for k, p in enumerate(ps):
            conv_mean[i, k], conv_se[i, k] = _sup_mean(dist ** p, ok_conv)
            grad_mean[i, k], grad_se[i, k] = _sup_mean(frob ** p, ok_grad)
    return MomentTable(labels, ps, conv_mean, conv_se, grad_mean, grad_se, reliable, min_paths,
                       tuple(warnings))


class Coalescence(NamedTuple):
    min_distance: np.ndarray
    fraction_below: float
    threshold: float


def coalescence_metric(flow, threshold=1e-2):
    """Per-path minimum over steps and point pairs of |X^i - X^j|."""
    X = flow.X
    G, M = X.shape[:2]
    best = np.full(M, np.inf)
    for i in range(G):
        for j in range(i + 1, G):
            dist = np.linalg.norm(X[i] - X[j], axis=-1).min(axis=-1)
            dist = np.where(flow.escaped[i] | flow.escaped[j], np.inf, dist)
            best = np.minimum(best, dist)
    frac = float(np.mean(best < threshold)) if G > 1 else 0.0
    return Coalescence(best, frac, float(threshold))


# -- export ------------------------------------------------------------------

def write_flow_csv(flow, path):
    """CSV with columns grid_index, path, step, t, x_1..x_d."""
    G, M, R, d = flow.X.shape
    gi, pi, ri = np.meshgrid(np.arange(G), np.arange(M), np.arange(R), indexing="ij")
    cols = [gi.ravel(), pi.ravel(), flow.steps[ri.ravel()], flow.times[ri.ravel()]]
    cols += [flow.X[..., j].ravel() for j in range(d)]
    header = ",".join(["grid_index", "path", "step", "t"] + [f"x_{j + 1}" for j in range(d)])
    data = np.column_stack(cols)
    fmt = ["%d", "%d", "%d"] + ["%.17g"] * (1 + d)
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)


def write_flow_manifest(flow, path):
    with open(path, "w") as fh:
        json.dump(flow.manifest(), fh, indent=2, sort_keys=True)
