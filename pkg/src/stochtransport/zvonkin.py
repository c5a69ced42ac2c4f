"""Backward parabolic system for the Zvonkin change of variables and its checks."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.sparse.linalg import splu

from .errors import (ConfigurationError, ContractionError, DomainError, IterationError,
                     SolverError, StochTransportError)
from .flow import integrate_flow
from .grids import SpatialGrid, central_gradient, interpolate, second_difference

SOLVER_TOL = 1e-9


@dataclass(frozen=True)
class PDEGridSpec:
    """Space-time discretization: spatial grid, time step, terminal time."""

    grid: SpatialGrid
    dt: float
    T: float
    record_every: int = 1
    buffer: Optional[float] = None

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    def __post_init__(self):
        if not (self.dt > 0 and self.T > 0):
            raise ConfigurationError("PDE grid needs dt > 0 and T > 0")
        k = self.T / self.dt
        if abs(k - round(k)) > 1e-8 * max(1.0, k):
            raise ConfigurationError(f"T/dt = {k:g} must be an integer")
        if self.record_every < 1:
            raise ConfigurationError("record_every must be >= 1")


@dataclass(frozen=True, eq=False)
class ZvonkinSolution:
    """U[t, *grid, component] on recorded times (ascending) with derivatives.

    ``grad`` and ``hess`` are finite differences of the stored U, computed on
    first access: grad[t, *grid, i, j] = dU_i/dx_j and hess[..., i, j, k].
    """

    lam: float
    grid: SpatialGrid
    times: np.ndarray
    U: np.ndarray
    T: float
    drift_name: str = ""
    dt: float = 0.0
    residual: float = 0.0
    norms: dict = field(default_factory=dict)
    p: float = 4.0
    q: float = 4.0

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        times = np.asarray(self.times, dtype=float)
        if U.shape != (len(times),) + self.grid.shape + (self.grid.d,):
            raise DomainError("U must have shape (times, *grid.shape, d)")
        if not np.all(np.isfinite(U)):
            raise SolverError("U has non-finite entries")
        U.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "times", times)

    @property
    def d(self):
        return self.grid.d

    @cached_property
    def grad(self):
        d = self.d
        comps = [central_gradient(self.U[..., i], self.grid, nbatch=1) for i in range(d)]
        out = np.stack(comps, axis=-2)
        out.setflags(write=False)
        return out

    @cached_property
    def hess(self):
        d = self.d
        out = np.empty(self.U.shape[:-1] + (d, d, d))
        for i in range(d):
            for j in range(d):
                for k in range(j, d):
                    h = second_difference(self.U[..., i], self.grid, j, k, nbatch=1)
                    out[..., i, j, k] = h
                    out[..., i, k, j] = h
        out.setflags(write=False)
        return out

    @cached_property
    def sup_grad(self):
        """max over recorded times and nodes of the operator norm of grad U."""
        G = self.grad
        if self.d == 1:
            return float(np.abs(G).max())
        return float(np.linalg.norm(G.reshape(-1, self.d, self.d), ord=2, axis=(1, 2)).max())

    @cached_property
    def _slopes(self):
        # Lipschitz constant of the interpolant per record; exact in d = 1
        R = len(self.times)
        if self.d == 1:
            U = self.U[..., 0]
            diff = np.roll(U, -1, axis=1) - U if self.grid.periodic else np.diff(U, axis=1)
            return np.abs(diff / self.grid.spacing[0]).reshape(R, -1).max(axis=1)
        G = self.grad.reshape(R, -1, self.d, self.d)
        return np.linalg.norm(G, ord=2, axis=(2, 3)).max(axis=1)

    def lipschitz(self, t):
        """Lipschitz bound of x -> U(t, x) from the two records bracketing t."""
        i, j, _ = self._bracket(t)
        return float(max(self._slopes[i], self._slopes[j]))

    def _bracket(self, t):
        ts = self.times
        if not (ts[0] - 1e-12 <= t <= ts[-1] + 1e-12):
            raise DomainError(f"t = {t} outside the solution time range [{ts[0]}, {ts[-1]}]")
        j = int(np.searchsorted(ts, t - 1e-12 * max(1.0, abs(t))))
        j = min(max(j, 0), len(ts) - 1)
        if abs(ts[j] - t) <= 1e-12 * max(1.0, abs(t)) or j == 0:
            return j, j, 0.0
        i = j - 1
        w = (t - ts[i]) / (ts[j] - ts[i])
        return i, j, float(w)

    def slice_U(self, t):
        i, j, w = self._bracket(t)
        return self.U[i] if w == 0.0 else (1 - w) * self.U[i] + w * self.U[j]

    def slice_grad(self, t):
        i, j, w = self._bracket(t)
        return self.grad[i] if w == 0.0 else (1 - w) * self.grad[i] + w * self.grad[j]

    def slice_hess(self, t):
        i, j, w = self._bracket(t)
        return self.hess[i] if w == 0.0 else (1 - w) * self.hess[i] + w * self.hess[j]

    def U_at(self, t, x):
        return interpolate(self.slice_U(t), self.grid, x, fill=0.0)

    def grad_at(self, t, x):
        return interpolate(self.slice_grad(t), self.grid, x, fill=0.0)

    def mixed_norms(self, p=None, q=None, forcing=None):
        """Discrete L^q_t L^p_x norms of U, grad U, hess U and d_t U."""
        p = self.p if p is None else p
        q = self.q if q is None else q
        vol = self.grid.cell_volume
        R = len(self.times)

        def norm(arr):
            mag = np.sqrt(np.sum(arr.reshape(R, self.grid.size, -1) ** 2, axis=-1))
            lp = (np.sum(mag ** p, axis=1) * vol) ** (1.0 / p)
            if R == 1:
                return float(lp[0])
            return float(trapezoid(lp ** q, self.times) ** (1.0 / q))

        out = {"U": norm(self.U), "grad": norm(self.grad), "hess": norm(self.hess)}
        out["dtU"] = norm(np.gradient(self.U, self.times, axis=0)) if R > 1 else 0.0
        return out

    def to_header(self):
        return {"lam": self.lam, "T": self.T, "dt": self.dt, "grid": self.grid.to_dict(),
                "times": [float(t) for t in self.times], "drift": self.drift_name,
                "residual": self.residual, "norms": self.norms, "p": self.p, "q": self.q}


def _laplacian_matrix(grid):
    """Sparse discrete Laplacian on the unknowns (interior nodes, or all if periodic)."""
    mats = []
    sizes = []
    for n, h in zip(grid.n, grid.spacing):
        m = n if grid.periodic else n - 2
        main = -2.0 * np.ones(m)
        off = np.ones(m - 1)
        A = sparse.diags([off, main, off], [-1, 0, 1], shape=(m, m), format="lil")
        if grid.periodic:
            A[0, m - 1] = 1.0
            A[m - 1, 0] = 1.0
        mats.append(A.tocsr() / h**2)
        sizes.append(m)
    total = None
    for ax, A in enumerate(mats):
        term = A
        for bx in range(len(mats)):
            if bx == ax:
                continue
            eye = sparse.identity(sizes[bx], format="csr")
            term = sparse.kron(term, eye) if bx > ax else sparse.kron(eye, term)
        total = term if total is None else total + term
    return total.tocsc(), tuple(sizes)


def _interior(grid):
    if grid.periodic:
        return tuple(slice(None) for _ in range(grid.d))
    return tuple(slice(1, -1) for _ in range(grid.d))


def _check_coverage(b, spec):
    grid = spec.grid
    if grid.periodic:
        return
    box = b.support_box() if hasattr(b, "support_box") else None
    if b.kind == "zero":
        return
    if box is None:
        raise ConfigurationError(
            "drift has unbounded support; use a periodic grid or truncate the drift")
    r = float(getattr(b, "mollifier_radius", 0.0))
    buffer = spec.buffer if spec.buffer is not None else max(4.0 * r, 2.0 * max(grid.spacing))
    lo, hi = box
    if np.any(np.asarray(grid.lo) > lo - buffer) or np.any(np.asarray(grid.hi) < hi + buffer):
        raise ConfigurationError(
            f"PDE grid [{grid.lo}, {grid.hi}] must cover the drift support [{lo}, {hi}] "
            f"with a buffer of {buffer:g}")


def _max_speed(b, grid, times, autonomous):
    pts = grid.points
    if autonomous:
        return float(np.linalg.norm(b.evaluate(0.0, pts), axis=-1).max())
    return max(float(np.linalg.norm(b.evaluate(t, pts), axis=-1).max()) for t in times)


def solve_backward_pde(b, lam, spec, forcing=None, p=4.0, q=4.0):
    """Solve d_t U + 1/2 Lap U + b.grad U - lam U + f = 0, U(T) = 0, with f = b by default.

    Semi-implicit in tau = T - t: the diffusion is implicit (sparse LU), the
    advection (central differences), damping and forcing are explicit.
    Requires lam * dt <= 1 and dt * max|b|^2 <= 1 (von Neumann bound for
    explicit central advection against implicit diffusion).
    """
    if not lam > 0:
        raise ConfigurationError("damping lambda must be positive")
    grid = spec.grid
    if grid.d not in (1, 2):
        raise ConfigurationError("the PDE solver supports d in {1, 2}")
    if b.d != grid.d:
        raise ConfigurationError("drift and grid dimensions differ")
    f = b if forcing is None else forcing
    dt, K = spec.dt, spec.n_steps
    step_times = spec.T - np.arange(K) * dt
    autonomous = getattr(b, "autonomous", True) and getattr(f, "autonomous", True)
    _check_coverage(b, spec)
    if lam * dt > 1.0:
        raise ConfigurationError(f"lambda * dt = {lam * dt:g} exceeds 1")
    speed = _max_speed(b, grid, step_times, getattr(b, "autonomous", True))
    if dt * speed**2 > 1.0:
        raise ConfigurationError(
            f"stability: dt * max|b|^2 = {dt * speed**2:g} exceeds 1 (max|b| = {speed:g})")
    Lap, sizes = _laplacian_matrix(grid)
    A = sparse.identity(Lap.shape[0], format="csc") - 0.5 * dt * Lap
    try:
        lu = splu(A)
    except RuntimeError as exc:  # singular factor
        raise SolverError(f"LU factorization failed: {exc}", {"n_unknowns": A.shape[0]}) from exc
    inner = _interior(grid)
    d = grid.d
    pts = grid.points
    U = np.zeros(grid.shape + (d,))
    recorded = [U.copy()]
    rec_times = [spec.T]
    b_cache = f_cache = None
    worst = 0.0
    for m in range(K):
        t = step_times[m]
        if b_cache is None or not autonomous:
            b_cache = b.evaluate(t, pts).reshape(grid.shape + (d,))
            f_cache = f.evaluate(t, pts).reshape(grid.shape + (d,))
        new = np.zeros_like(U)
        for i in range(d):
            G = central_gradient(U[..., i], grid)
            adv = np.sum(b_cache * G, axis=-1)
            rhs = (U[..., i] + dt * (adv - lam * U[..., i] + f_cache[..., i]))[inner].ravel()
            sol = lu.solve(rhs)
            res = np.abs(A @ sol - rhs).max() / max(1.0, np.abs(rhs).max())
            worst = max(worst, float(res))
            if not np.all(np.isfinite(sol)) or res > SOLVER_TOL:
                raise SolverError("linear solve failed", {"step": m, "component": i,
                                                          "relative_residual": float(res)})
            new[(*inner, i)] = sol.reshape(sizes)
        U = new
        if (m + 1) % spec.record_every == 0 or m + 1 == K:
            recorded.append(U.copy())
            rec_times.append(spec.T - (m + 1) * dt)
    rec_times = np.asarray(rec_times[::-1])
    rec_times[0] = max(rec_times[0], 0.0) if abs(rec_times[0]) > 1e-12 else 0.0
    Ustack = np.stack(recorded[::-1])
    sol = ZvonkinSolution(lam=float(lam), grid=grid, times=rec_times, U=Ustack, T=spec.T,
                          drift_name=getattr(b, "name", ""), dt=dt, residual=worst, p=p, q=q)
    norms = sol.mixed_norms()
    bnorm = _forcing_norm(f, grid, rec_times, p, q, autonomous)
    norms["b"] = bnorm
    total = norms["U"] + norms["grad"] + norms["hess"] + norms["dtU"]
    norms["schauder_ratio"] = total / bnorm if bnorm > 0 else 0.0
    sol.norms.update(norms)
    return sol


def _forcing_norm(f, grid, times, p, q, autonomous):
    vol = grid.cell_volume
    pts = grid.points

    def lp(t):
        mag = np.linalg.norm(f.evaluate(t, pts), axis=-1)
        return (np.sum(mag ** p) * vol) ** (1.0 / p)

    if autonomous or len(times) == 1:
        return float((lp(times[0]) ** q * (times[-1] - times[0] or 1.0)) ** (1.0 / q))
    vals = np.array([lp(t) for t in times])
    return float(trapezoid(vals ** q, times) ** (1.0 / q))


# -- gradient bound sweep ----------------------------------------------------

class SweepRow(NamedTuple):
    lam: float
    sup_grad: float
    within_bound: bool
    error: str


@dataclass(frozen=True)
class SweepTable:
    rows: tuple
    lam_star: Optional[float]
    monotone: bool
    bound: float = 0.5
    solutions: dict = field(default_factory=dict, repr=False)

    def as_dicts(self):
        return [r._asdict() for r in self.rows]


def gradient_bound_sweep(b, lambdas, spec, bound=0.5, tol=1e-3, keep_solutions=False):
    """sup |grad U| for each lambda; lambda* is the smallest lambda beyond which the bound holds."""
    lambdas = [float(x) for x in lambdas]
    if any(b2 <= a for a, b2 in zip(lambdas, lambdas[1:])):
        raise DomainError("lambda list must be strictly increasing")
    rows = []
    sols = {}
    for lam in lambdas:
        try:
            sol = solve_backward_pde(b, lam, spec)
        except StochTransportError as exc:
            rows.append(SweepRow(lam, math.nan, False, f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(SweepRow(lam, sol.sup_grad, sol.sup_grad <= bound, ""))
        if keep_solutions:
            sols[lam] = sol
    lam_star = None
    for i in range(len(rows)):
        if all(r.within_bound for r in rows[i:]):
            lam_star = rows[i].lam
            break
    vals = [r.sup_grad for r in rows if not math.isnan(r.sup_grad)]
    monotone = all(v2 <= v1 + tol for v1, v2 in zip(vals, vals[1:]))
    return SweepTable(tuple(rows), lam_star, monotone, bound, sols)


# -- the diffeomorphism ------------------------------------------------------

def gamma_apply(sol, t, x):
    """gamma_t(x) = x + U(t, x), multilinear interpolation off-grid."""
    x = np.asarray(x, dtype=float)
    return x + sol.U_at(t, x)


def gamma_invert(sol, t, y, tol=1e-10, max_iter=100, x0=None, U_slice=None):
    """Solve y = x + U(t, x) by the fixed-point iteration x <- y - U(t, x)."""
    lip = sol.lipschitz(t)
    if not lip < 1.0:
        raise ContractionError(f"sup|grad U| = {lip:.4g} >= 1; gamma_t is not invertible "
                               "by contraction", lip)
    y = np.asarray(y, dtype=float)
    Ut = sol.slice_U(t) if U_slice is None else U_slice
    x = y.copy() if x0 is None else np.array(x0, dtype=float)
    for _ in range(max_iter):
        nxt = y - interpolate(Ut, sol.grid, x, fill=0.0)
        delta = np.abs(nxt - x).max() if x.size else 0.0
        x = nxt
        if delta <= tol:
            break
    resid = np.abs(x + interpolate(Ut, sol.grid, x, fill=0.0) - y).max() if x.size else 0.0
    if not resid <= 1e-8:
        raise IterationError(f"fixed-point iteration did not converge (residual {resid:.3g} "
                             f"after {max_iter} iterations)")
    return x


def inverse_gradient_bound(sol, t, points, h=None):
    """max over points of |grad gamma_t^{-1}| by central differences (operator norm)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = sol.d
    h = 1e-4 * max(sol.grid.spacing) if h is None else h
    J = np.empty((pts.shape[0], d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, :, j] = (gamma_invert(sol, t, pts + e) - gamma_invert(sol, t, pts - e)) / (2 * h)
    return float(np.linalg.norm(J, ord=2, axis=(1, 2)).max())


# -- conjugacy ---------------------------------------------------------------

@dataclass(frozen=True)
class ConjugacyResult:
    residual: float
    per_path: np.ndarray
    n_excluded: int
    dt: float
    reading: str
    mean_residual: float


def conjugacy_residual(b, sol, grid, noise, sigma=1.0, reading="ito", margin=0.5, threads=1):
    """max over points, paths and steps of |Y_t - gamma_t(X_t)|.

    Y is integrated by Euler-Maruyama with drift lam U(t, z) and diffusion
    Id + grad U(t, z), where z = gamma_t^{-1}(Y_t) (``reading="ito"``) or the
    frozen point gamma_0^{-1}(Y_0) (``reading="printed"``). Pairs whose X
    leaves the grid shrunk by ``margin`` are excluded and counted.
    """
    if sigma != 1.0:
        raise DomainError("the conjugacy is stated for unit noise; sigma must be 1")
    if reading not in ("ito", "printed"):
        raise DomainError("reading must be 'ito' or 'printed'")
    horizon = min(sol.T, noise.T)
    flow = integrate_flow(b, 1.0, grid, noise, "forward", horizon=horizon, threads=threads)
    X = flow.X
    G, M, R, d = X.shape
    dt = noise.dt
    x0 = np.broadcast_to(flow.points[:, None, :], (G, M, d))
    Y = gamma_apply(sol, 0.0, x0)
    z = gamma_invert(sol, 0.0, Y, x0=x0)
    z_frozen = z.copy()
    safe = sol.grid.contains(X, margin=margin).all(axis=-1) & ~flow.escaped
    err = np.zeros((G, M))
    dW = noise.increments
    lam = sol.lam
    for k in range(R - 1):
        t = k * dt
        Ut = sol.slice_U(t)
        Gt = sol.slice_grad(t)
        if reading == "ito":
            z = gamma_invert(sol, t, Y, x0=z, U_slice=Ut)
        else:
            z = z_frozen
        drift = lam * interpolate(Ut, sol.grid, z, fill=0.0)
        J = interpolate(Gt, sol.grid, z, fill=0.0)
        inc = dW[None, :, k, :]
        Y = Y + drift * dt + inc + np.einsum("gmij,gmj->gmi", J, np.broadcast_to(inc, Y.shape))
        target = gamma_apply(sol, t + dt, X[:, :, k + 1])
        err = np.maximum(err, np.linalg.norm(Y - target, axis=-1))
    err = np.where(safe, err, 0.0)
    per_path = err.max(axis=0)
    kept = err[safe]
    return ConjugacyResult(float(err.max()) if err.size else 0.0, per_path,
                           int((~safe).sum()), dt, reading,
                           float(kept.mean()) if kept.size else 0.0)


# -- quadratic variation -----------------------------------------------------

@dataclass(frozen=True)
class QVEstimate:
    mean: float
    se: float
    max: float
    values: np.ndarray
    n_excluded: int
    constant: float


def quadratic_variation_estimate(sol, flow, constant=1.0):
    """Per-path A_T = C int_0^T |hess U(s, X_s)|^2 ds by left-endpoint sums."""
    if flow.direction != "forward":
        raise DomainError("quadratic variation is defined along forward trajectories")
    if flow.X.shape[-1] != sol.d:
        raise DomainError("flow and solution dimensions differ")
    X = flow.X[: flow.base_count or flow.X.shape[0]]
    times = flow.times
    inside = sol.grid.contains(X).all(axis=-1) & ~flow.escaped[: X.shape[0]]
    total = np.zeros(X.shape[:2])
    for r in range(len(times) - 1):
        if times[r] > sol.T:
            break
        H = interpolate(sol.slice_hess(min(times[r], sol.T)), sol.grid, X[:, :, r], fill=0.0)
        sq = np.sum(H.reshape(H.shape[:2] + (-1,)) ** 2, axis=-1)
        total += sq * (times[r + 1] - times[r])
    vals = constant * total[inside]
    n = vals.size
    return QVEstimate(float(vals.mean()) if n else math.nan,
                      float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
                      float(vals.max()) if n else math.nan, vals, int((~inside).sum()),
                      float(constant))


# -- portable serialization --------------------------------------------------

def save_solution(sol, directory, time_stride=1):
    """JSON header plus CSV blocks U.csv (t, x_*, U_*) and gradU.csv (t, x_*, dU_i/dx_j).

    ``time_stride`` keeps every k-th record (the terminal record always).
    """
    os.makedirs(directory, exist_ok=True)
    keep = sorted(set(range(0, len(sol.times), time_stride)) | {len(sol.times) - 1})
    if len(keep) < len(sol.times):
        sol = ZvonkinSolution(lam=sol.lam, grid=sol.grid, times=sol.times[keep], U=sol.U[keep],
                              T=sol.T, drift_name=sol.drift_name, dt=sol.dt,
                              residual=sol.residual, norms=sol.norms, p=sol.p, q=sol.q)
    d = sol.d
    R = len(sol.times)
    pts = np.tile(sol.grid.points, (R, 1))
    tcol = np.repeat(sol.times, sol.grid.size)[:, None]
    xs = [f"x_{j + 1}" for j in range(d)]
    with open(os.path.join(directory, "zvonkin_header.json"), "w") as fh:
        json.dump(sol.to_header(), fh, indent=2, sort_keys=True)
    U = sol.U.reshape(R * sol.grid.size, d)
    np.savetxt(os.path.join(directory, "U.csv"), np.hstack([tcol, pts, U]), delimiter=",",
               fmt="%.17g", comments="",
               header=",".join(["t"] + xs + [f"U_{i + 1}" for i in range(d)]))
    Gr = sol.grad.reshape(R * sol.grid.size, d * d)
    names = [f"dU{i + 1}_dx{j + 1}" for i in range(d) for j in range(d)]
    np.savetxt(os.path.join(directory, "gradU.csv"), np.hstack([tcol, pts, Gr]),
               delimiter=",", fmt="%.17g", comments="", header=",".join(["t"] + xs + names))


def load_solution(directory):
    with open(os.path.join(directory, "zvonkin_header.json")) as fh:
        head = json.load(fh)
    grid = SpatialGrid.from_dict(head["grid"])
    d = grid.d
    data = np.loadtxt(os.path.join(directory, "U.csv"), delimiter=",", skiprows=1, ndmin=2)
    R = len(head["times"])
    U = data[:, 1 + d:].reshape((R,) + grid.shape + (d,))
    return ZvonkinSolution(lam=head["lam"], grid=grid, times=np.asarray(head["times"]), U=U,
                           T=head["T"], drift_name=head.get("drift", ""), dt=head.get("dt", 0.0),
                           residual=head.get("residual", 0.0), norms=head.get("norms", {}),
                           p=head.get("p", 4.0), q=head.get("q", 4.0))
