"""Representation solution u(t, x) = u0(phi_0^t(x)) and the weak-form residual."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, SupportError
from .flow import integrate_flow
from .grids import SpatialGrid, central_gradient, laplacian

IC_KINDS = ("gaussian-bump", "asymmetric-smooth", "compact-bump", "step")


@dataclass(frozen=True)
class InitialConditionSpec:
    """Closed-form initial datum. ``params`` override amplitude, center and width."""

    kind: str
    params: dict = field(default_factory=dict)
    d: int = 1

    def __post_init__(self):
        if self.kind not in IC_KINDS:
            raise DomainError(f"unknown initial condition {self.kind!r}; expected {IC_KINDS}")
        object.__setattr__(self, "params", dict(self.params))

    @property
    def sobolev_regular(self):
        """Whether u0 lies in W^{1,r} for every r >= 1."""
        return self.kind != "step"

    def _center(self, default):
        c = self.params.get("center", default)
        return np.broadcast_to(np.asarray(c, dtype=float), (self.d,))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        amp = float(self.params.get("amplitude", 1.0))
        if self.kind == "gaussian-bump":
            c = self._center(0.0)
            w = float(self.params.get("width", 0.5))
            return amp * np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * w * w))
        if self.kind == "asymmetric-smooth":
            # off-centre Gaussian: smooth, not symmetric about the coalescence point 0
            c = self._center([0.5, 0.25][: self.d] if self.d <= 2 else 0.5)
            w = float(self.params.get("width", 0.35))
            return amp * np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * w * w))
        if self.kind == "compact-bump":
            c = self._center(0.0)
            w = float(self.params.get("width", 0.75))
            r2 = np.sum((x - c) ** 2, axis=-1) / (w * w)
            out = np.zeros(r2.shape)
            inside = r2 < 1.0
            out[inside] = amp * np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
            return out
        c = float(self.params.get("center", 0.0))
        return amp * (x[..., 0] >= c).astype(float)

    def describe(self):
        return {"kind": self.kind, "params": self.params, "d": self.d,
                "sobolev_regular": self.sobolev_regular}


def make_initial_condition(kind, d=1, **params):
    return InitialConditionSpec(kind, params, d)


IC_CATALOG = {
    "gaussian-bump": "amplitude * exp(-|x - center|^2 / (2 width^2)), width 0.5",
    "asymmetric-smooth": "Gaussian centred at 0.5 with width 0.35 (not symmetric about 0)",
    "compact-bump": "amplitude * exp(1 - 1/(1 - |x - center|^2/width^2)) inside the ball",
    "step": "amplitude * 1{x_1 >= center}; not Sobolev regular",
}


@dataclass(frozen=True, eq=False)
class ScalarFieldGrid:
    """Scalar samples ``values[*batch, *grid.shape]`` with an optional mask.

    ``mask`` marks excluded (escaped) cells with True. ``times`` labels a
    time batch axis when present (axis -grid.d - 1).
    """

    grid: SpatialGrid
    values: np.ndarray
    tag: str = "field"
    mask: Optional[np.ndarray] = None
    closed_form: Optional[Callable] = None
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[v.ndim - self.grid.d:] != self.grid.shape:
            raise DomainError(f"values shape {v.shape} does not end with grid shape "
                              f"{self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("field values must be finite")
        object.__setattr__(self, "values", v)
        if self.mask is not None:
            m = np.broadcast_to(np.asarray(self.mask, dtype=bool), v.shape)
            object.__setattr__(self, "mask", m)

    @classmethod
    def from_function(cls, grid, fn, tag="field"):
        return cls(grid, np.asarray(fn(grid.mesh), dtype=float), tag, closed_form=fn)

    @property
    def batch_shape(self):
        return self.values.shape[: self.values.ndim - self.grid.d]

    def valid(self):
        """True where the value is usable."""
        if self.mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return ~self.mask

    def scaled(self, c):
        return ScalarFieldGrid(self.grid, c * self.values, self.tag, self.mask, None, self.times)

    def shifted(self, c):
        return ScalarFieldGrid(self.grid, self.values + c, self.tag, self.mask, None, self.times)

    def to_csv(self, path):
        """Columns x_1..x_d, then one value column per batch entry."""
        d = self.grid.d
        vals = self.values.reshape(-1, self.grid.size).T
        data = np.hstack([self.grid.points, vals])
        names = [f"x_{j + 1}" for j in range(d)] + [f"v_{k}" for k in range(vals.shape[1])]
        np.savetxt(path, data, delimiter=",", fmt="%.17g", header=",".join(names), comments="")


def representation_solution(u0, backward_flow, t):
    """u(t, x_j) = u0(phi_0^t(x_j)) per path; escaped cells are masked."""
    fl = backward_flow
    if fl.direction != "backward":
        raise DomainError("representation needs a backward flow")
    if fl.grid is None:
        raise DomainError("backward flow must be integrated on a SpatialGrid")
    if not math.isclose(fl.horizon, t, rel_tol=1e-12, abs_tol=1e-12):
        raise DomainError(f"backward flow has origin {fl.horizon}, not t = {t}")
    grid = fl.grid
    X = fl.final()
    vals = np.asarray(u0(X), dtype=float)  # (G, M)
    M = fl.n_paths
    values = vals.T.reshape((M,) + grid.shape)
    mask = fl.escaped.T.reshape((M,) + grid.shape)
    return ScalarFieldGrid(grid, values, "u(t)", mask if mask.any() else None,
                           times=np.array([t]))


def _is_translation(b):
    """Spatially constant, untruncated drift: Euler-Maruyama is exact for it."""
    kind = getattr(b, "kind", None)
    return kind == "zero" or (kind == "constant" and math.isinf(b.trunc))


def representation_series(u0, b, sigma, grid, noise, steps=None, threads=1, fast=True):
    """u at several step indices (default: every step), values[path, time, *grid].

    In general one backward solve per output time, since the inverse flow
    depends on its origin. For translation drifts (zero or untruncated
    constant) the inverse flow is x - int_0^t b - sigma W_t, which the
    scheme reproduces exactly, so ``fast`` uses cumulative sums instead.
    """
    K = noise.n_steps
    steps = list(range(K + 1)) if steps is None else [int(s) for s in steps]
    times = np.asarray(steps) * noise.dt
    if fast and _is_translation(b):
        W = noise.brownian()[:, steps, :]  # (M, R, d)
        shift = np.zeros((len(steps), grid.d))
        if b.kind == "constant":
            rates = np.array([b.evaluate(k * noise.dt, np.zeros((1, grid.d)))[0]
                              for k in range(max(steps))]) if max(steps) > 0 else None
            drift_int = np.zeros((K + 1, grid.d))
            if rates is not None:
                drift_int[1:max(steps) + 1] = np.cumsum(rates * noise.dt, axis=0)
            shift = drift_int[steps]
        disp = sigma * W + shift[None]
        pts = grid.mesh  # (*shape, d)
        expand = (slice(None), slice(None)) + (None,) * grid.d + (slice(None),)
        X = pts[None, None] - disp[expand]
        values = np.asarray(u0(X), dtype=float)
        return ScalarFieldGrid(grid, values, "u(t)", None, times=times)
    fields = []
    masks = []
    for k in steps:
        fl = integrate_flow(b, sigma, grid, noise, "backward", horizon=k * noise.dt,
                            record="end", threads=threads)
        f = representation_solution(u0, fl, k * noise.dt)
        fields.append(f.values)
        masks.append(~f.valid())
    values = np.stack(fields, axis=1)
    mask = np.stack(masks, axis=1)
    return ScalarFieldGrid(grid, values, "u(t)", mask if mask.any() else None, times=times)


def _space_integral(arr, grid):
    axes = tuple(range(arr.ndim - grid.d, arr.ndim))
    return arr.sum(axis=axes) * grid.cell_volume


def weak_form_residual(u_fields, b, sigma, u0, test, increments, t=None):
    """Per-path |R(t)| of the Ito weak formulation against the test function.

    R = int u(t) chi + sum_k dt int b.grad u_k chi - int u0 chi
        - sigma sum_i sum_k (int u_k d_i chi) dW^i_k - sigma^2/2 sum_k dt int u_k Lap chi

    ``u_fields.values`` has shape (paths, steps + 1, *grid) on the uniform
    time grid of ``increments`` (paths, steps, d); ``t`` defaults to the last
    time.
    """
    grid = u_fields.grid
    d = grid.d
    inc = np.asarray(getattr(increments, "increments", increments), dtype=float)
    U = u_fields.values
    if U.ndim != d + 2:
        raise DomainError("u_fields must have shape (paths, times, *grid)")
    M, R = U.shape[:2]
    times = u_fields.times
    if times is None or len(times) != R:
        raise DomainError("u_fields must carry its time stamps")
    dt = float(times[1] - times[0]) if R > 1 else 0.0
    if R > 1 and not np.allclose(np.diff(times), dt, rtol=1e-9, atol=1e-12):
        raise DomainError("u_fields must be sampled at every step of a uniform time grid")
    kt = R - 1 if t is None else int(round(t / dt)) if dt > 0 else 0
    if kt < 0 or kt >= R:
        raise DomainError(f"t = {t} outside the sampled times")
    if inc.shape[0] != M or inc.shape[1] < kt or inc.shape[2] != d:
        raise DomainError("increments must have shape (paths, >= steps, d)")
    if test.grid != grid:
        raise DomainError("test function and u fields must share the grid")
    chi = test.values
    support = np.abs(chi) > 0
    if u_fields.mask is not None:
        # the central stencil at the support reaches one node further
        reach = support.copy()
        for ax in range(d):
            reach |= np.roll(support, 1, axis=ax) | np.roll(support, -1, axis=ax)
        hit = u_fields.mask[:, : kt + 1] & reach
        if hit.any():
            raise SupportError("test function support touches masked cells")
    if kt == 0:
        return np.abs(_space_integral(U[:, 0] * chi, grid) - _space_integral(
            u0(grid.mesh) * chi if callable(u0) else u0.values * chi, grid))
    u0v = u0(grid.mesh) if callable(u0) else np.asarray(getattr(u0, "values", u0))
    gchi = central_gradient(chi, grid)
    lchi = laplacian(chi, grid)
    Uk = U[:, :kt]
    acc = _space_integral(U[:, kt] * chi, grid) - _space_integral(u0v * chi, grid)
    gu = central_gradient(Uk, grid, nbatch=2)  # (M, kt, *grid, d)
    for k in range(kt):
        bk = b.evaluate(times[k], grid.mesh)
        acc = acc + dt * _space_integral(np.sum(bk * gu[:, k], axis=-1) * chi, grid)
    for i in range(d):
        coef = _space_integral(Uk * gchi[..., i], grid)  # (M, kt)
        acc = acc - sigma * np.sum(coef * inc[:, :kt, i], axis=1)
    acc = acc - 0.5 * sigma**2 * dt * np.sum(_space_integral(Uk * lchi, grid), axis=1)
    return np.abs(acc)


def residual_quantiles(residuals, levels=(0.5, 0.9)):
    r = np.asarray(residuals, dtype=float)
    return {float(q): float(np.quantile(r, q)) for q in levels}
