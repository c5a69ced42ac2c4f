"""Drift fields, the mixed Lebesgue norm, mollification and the integrability check."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy import integrate, special

from .errors import DomainError, EvaluationError, ResolutionError
from .grids import SpatialGrid, interpolate

KINDS = ("zero", "constant", "linear", "coalescing", "tabulated")


@dataclass(frozen=True, eq=False)
class DriftField:
    """Vector field b(t, x) on [0, T] x R^d.

    The field is forced to zero outside the truncation box
    ``|x - center|_inf <= trunc`` and outside the optional active time
    window ``[t0, t1]``. ``half_width`` is the simulation domain [-L, L]^d.
    """

    kind: str
    d: int = 1
    half_width: float = 2.0
    T: float = 2.0
    trunc: float = math.inf
    center: Optional[tuple] = None
    c: Optional[tuple] = None
    A: Optional[tuple] = None
    scale: float = 1.0
    window: Optional[tuple] = None
    table_grid: Optional[SpatialGrid] = None
    table_values: Optional[np.ndarray] = None
    mollifier_radius: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown drift kind {self.kind!r}; expected one of {KINDS}")
        if self.d < 1:
            raise DomainError("dimension d must be >= 1")
        if not self.trunc > 0:
            raise DomainError("truncation radius must be positive")
        center = np.zeros(self.d) if self.center is None else np.asarray(self.center, float)
        if center.shape != (self.d,):
            raise DomainError("center must have length d")
        object.__setattr__(self, "center", tuple(center))
        if self.kind == "constant":
            c = np.broadcast_to(np.asarray(self.c if self.c is not None else 1.0, float), (self.d,))
            object.__setattr__(self, "c", tuple(c))
        if self.kind == "linear":
            A = np.asarray(self.A if self.A is not None else -np.eye(self.d), float)
            if A.ndim == 0:
                A = A * np.eye(self.d)
            if A.shape != (self.d, self.d):
                raise DomainError("linear drift needs a d x d matrix")
            object.__setattr__(self, "A", tuple(map(tuple, A)))
        if self.kind == "tabulated":
            if self.table_grid is None or self.table_values is None:
                raise DomainError("tabulated drift needs table_grid and table_values")
            vals = np.asarray(self.table_values, float)
            if vals.shape != self.table_grid.shape + (self.d,):
                raise DomainError("table_values shape must be grid.shape + (d,)")
            if not np.all(np.isfinite(vals)):
                raise EvaluationError("tabulated drift has non-finite values")
            vals.setflags(write=False)
            object.__setattr__(self, "table_values", vals)
        if self.window is not None:
            t0, t1 = self.window
            if not t1 > t0:
                raise DomainError("time window must satisfy t1 > t0")
            object.__setattr__(self, "window", (float(t0), float(t1)))
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    @property
    def autonomous(self):
        return self.window is None

    def support_box(self):
        """(lo, hi) of the region where b can be nonzero, or None if unbounded."""
        if self.kind == "zero":
            c = np.asarray(self.center)
            return c, c.copy()
        lo = np.full(self.d, -np.inf)
        hi = np.full(self.d, np.inf)
        if math.isfinite(self.trunc):
            lo = np.asarray(self.center) - self.trunc
            hi = np.asarray(self.center) + self.trunc
        if self.table_grid is not None:
            lo = np.maximum(lo, self.table_grid.lo)
            hi = np.minimum(hi, self.table_grid.hi)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            return None
        return lo, hi

    def _raw(self, x):
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(self.c), x.shape).copy()
        if self.kind == "linear":
            return x @ np.asarray(self.A).T
        if self.kind == "coalescing":
            return -self.scale * np.sign(x) * np.sqrt(np.abs(x))
        return interpolate(self.table_values, self.table_grid, x, fill=0.0)

    def evaluate(self, t, x):
        """Evaluate b(t, x) for ``x`` of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise DomainError(f"points have dimension {x.shape[-1]}, drift has {self.d}")
        if self.window is not None and not (self.window[0] <= t <= self.window[1]):
            return np.zeros_like(x)
        out = self._raw(x)
        if math.isfinite(self.trunc):
            inside = np.all(np.abs(x - np.asarray(self.center)) <= self.trunc, axis=-1)
            out = np.where(inside[..., None], out, 0.0)
        return out

    __call__ = evaluate

    def negated(self):
        """The field -b, used for backward flows."""
        return _NegatedDrift(self)

    def describe(self):
        info = {"name": self.name, "kind": self.kind, "d": self.d,
                "half_width": self.half_width, "T": self.T,
                "trunc": None if math.isinf(self.trunc) else self.trunc,
                "center": list(self.center)}
        if self.c is not None:
            info["c"] = list(self.c)
        if self.A is not None:
            info["A"] = [list(r) for r in self.A]
        if self.kind == "coalescing":
            info["scale"] = self.scale
        if self.window is not None:
            info["window"] = list(self.window)
        if self.mollifier_radius:
            info["mollifier_radius"] = self.mollifier_radius
        return info


class _NegatedDrift:
    def __init__(self, base):
        self.base = base
        self.d = base.d

    def evaluate(self, t, x):
        return -self.base.evaluate(t, x)

    __call__ = evaluate


def _box_from_params(d, trunc, center):
    return {"d": d, "trunc": math.inf if trunc is None else float(trunc),
            "center": None if center is None else tuple(np.broadcast_to(center, (d,)))}


def zero_drift(d=1, half_width=2.0, T=2.0):
    return DriftField("zero", d=d, half_width=half_width, T=T, name="zero")


def constant_drift(c=1.0, d=1, half_width=2.0, T=2.0, trunc=None, center=None, window=None):
    return DriftField("constant", c=tuple(np.broadcast_to(np.asarray(c, float), (d,))),
                      half_width=half_width, T=T, window=None if window is None else tuple(window),
                      name="constant", **_box_from_params(d, trunc, center))


def linear_drift(A=-1.0, d=1, half_width=2.0, T=2.0, trunc=None, center=None):
    return DriftField("linear", A=A, half_width=half_width, T=T, name="linear",
                      **_box_from_params(d, trunc, center))


def coalescing_drift(trunc=1.0, d=1, scale=1.0, half_width=2.0, T=2.0, center=None):
    """Truncated -scale * sign(x) * sqrt|x|, componentwise."""
    return DriftField("coalescing", scale=scale, half_width=half_width, T=T,
                      name="coalescing", **_box_from_params(d, trunc, center))


def indicator_drift(d=1, lo=0.0, hi=1.0, t0=0.0, t1=1.0, value=1.0, half_width=2.0, T=2.0):
    """b = value * e_1 on the cube [lo, hi]^d and times [t0, t1]."""
    c = np.zeros(d)
    c[0] = value
    mid = 0.5 * (lo + hi)
    return DriftField("constant", d=d, c=tuple(c), trunc=0.5 * (hi - lo), center=(mid,) * d,
                      window=(t0, t1), half_width=half_width, T=T, name="indicator")


DRIFT_CATALOG = {
    "zero": (zero_drift, "b = 0"),
    "constant": (constant_drift, "b = c, optionally truncated to a box and time window"),
    "linear": (linear_drift, "b(x) = A x"),
    "coalescing": (coalescing_drift, "b(x) = -sign(x) sqrt|x| truncated to |x| <= trunc"),
    "indicator": (indicator_drift, "b = e_1 on [lo, hi]^d x [t0, t1]"),
}


def make_drift(kind, **params):
    """Build a catalog drift from its string name and a parameter map."""
    if kind not in DRIFT_CATALOG:
        raise DomainError(f"unknown drift {kind!r}; catalog has {sorted(DRIFT_CATALOG)}")
    return DRIFT_CATALOG[kind][0](**params)


# -- integrability -----------------------------------------------------------

@dataclass(frozen=True)
class MixedNormSpec:
    p: float
    q: float
    T: float = 1.0
    d: int = 1

    def __post_init__(self):
        _check_exponents(self.p, self.q, self.d)
        if not self.T > 0:
            raise DomainError("horizon T must be positive")


def _check_exponents(p, q, d):
    if not (p >= 2):
        raise DomainError(f"constraint p >= 2 violated (p = {p})")
    if not (q >= 2):
        raise DomainError(f"constraint q >= 2 violated (q = {q})")
    if not (d >= 1):
        raise DomainError(f"constraint d >= 1 violated (d = {d})")


class KRCheck(NamedTuple):
    admissible: bool
    slack: float


def krylov_rockner_check(spec):
    """Admissibility of (p, q, d) for the condition d/p + 2/q < 1."""
    _check_exponents(spec.p, spec.q, spec.d)
    slack = 1.0 - spec.d / spec.p - 2.0 / spec.q
    return KRCheck(bool(spec.d / spec.p + 2.0 / spec.q < 1.0), float(slack))


class MixedNorm(NamedTuple):
    value: float
    error: float


def _midpoint_nodes(lo, hi, n):
    h = (np.asarray(hi) - np.asarray(lo)) / n
    axes = [lo[k] + (np.arange(n) + 0.5) * h[k] for k in range(len(lo))]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
    return pts, float(np.prod(h))


def _time_nodes(T, nt):
    return (np.arange(nt) + 0.5) * (T / nt), T / nt


def _spatial_lp(fn, t, pts, vol, p, chunk=200_000):
    # sum of |f|^p over nodes, chunked to cap memory
    total = 0.0
    for s in range(0, pts.shape[0], chunk):
        v = np.asarray(fn(t, pts[s:s + chunk]), dtype=float)
        if not np.all(np.isfinite(v)):
            raise EvaluationError("drift produced non-finite values during quadrature")
        mag = np.linalg.norm(v, axis=-1)
        total += float(np.sum(mag ** p))
    return total * vol


def _mixed_quadrature(fn, box, spec, n, nt, autonomous):
    pts, vol = _midpoint_nodes(box[0], box[1], n)
    if autonomous:
        lp = _spatial_lp(fn, 0.5 * spec.T, pts, vol, spec.p) ** (1.0 / spec.p)
        return (spec.T * lp ** spec.q) ** (1.0 / spec.q)
    times, dt = _time_nodes(spec.T, nt)
    acc = 0.0
    for t in times:
        acc += (_spatial_lp(fn, t, pts, vol, spec.p) ** (1.0 / spec.p)) ** spec.q * dt
    return acc ** (1.0 / spec.q)


def _resolve_box(*drifts):
    boxes = [b.support_box() for b in drifts]
    if any(bx is None for bx in boxes):
        raise DomainError("mixed norm requires truncated drifts with a finite support box")
    lo = np.min([bx[0] for bx in boxes], axis=0)
    hi = np.max([bx[1] for bx in boxes], axis=0)
    return lo, hi


def _norm_with_error(fn, box, spec, resolution, time_resolution, autonomous):
    if resolution < 2:
        raise ResolutionError("quadrature resolution must be >= 2")
    lo, hi = box
    if np.any(hi <= lo):
        return MixedNorm(0.0, 0.0)
    nt = time_resolution or resolution
    fine = _mixed_quadrature(fn, box, spec, resolution, nt, autonomous)
    coarse = _mixed_quadrature(fn, box, spec, resolution // 2, max(nt // 2, 1), autonomous)
    return MixedNorm(float(fine), float(abs(fine - coarse)))


def mixed_norm(b, spec, resolution=400, time_resolution=None):
    """Composite-midpoint value of (int_0^T ||b(t)||_p^q dt)^(1/q).

    The reported error is the difference to the half-resolution value.
    """
    if b.kind == "zero":
        return MixedNorm(0.0, 0.0)
    return _norm_with_error(b.evaluate, _resolve_box(b), spec, resolution,
                            time_resolution, b.autonomous)


def mixed_norm_distance(a, b, spec, resolution=400, time_resolution=None):
    """Mixed norm of a - b on the union of the two support boxes."""
    live = [x for x in (a, b) if x.kind != "zero"]
    if not live:
        return MixedNorm(0.0, 0.0)
    box = _resolve_box(*live)
    fn = lambda t, x: a.evaluate(t, x) - b.evaluate(t, x)  # noqa: E731
    return _norm_with_error(fn, box, spec, resolution, time_resolution,
                            a.autonomous and b.autonomous)


# -- mollification -----------------------------------------------------------

def _unit_ball_volume(d):
    return math.pi ** (d / 2) / special.gamma(d / 2 + 1)


@dataclass(frozen=True)
class MollifierFamily:
    """Polynomial bump theta(y) proportional to (1 - |y|^2)^power on the unit ball.

    theta_n(y) = n^d theta(n y) has support radius 1/n.
    """

    power: int = 3
    nodes_per_radius: int = 12

    def __post_init__(self):
        if self.power < 1 or self.nodes_per_radius < 2:
            raise DomainError("mollifier needs power >= 1 and nodes_per_radius >= 2")

    def normalization(self, d):
        """Constant c_d with c_d * int_{|y|<1} (1-|y|^2)^power dy = 1 (adaptive quadrature)."""
        radial, _ = integrate.quad(lambda r: (1 - r * r) ** self.power * r ** (d - 1), 0.0, 1.0,
                                   epsabs=1e-14, epsrel=1e-13)
        surface = d * _unit_ball_volume(d)
        return 1.0 / (surface * radial)

    def profile(self, y, n):
        y = np.asarray(y, dtype=float)
        d = y.shape[-1]
        r2 = np.sum((n * y) ** 2, axis=-1)
        return np.where(r2 < 1.0, self.normalization(d) * n**d * (1.0 - r2) ** self.power, 0.0)

    def radius(self, n):
        return 1.0 / n

    def weights(self, n, d):
        """Quadrature offsets y_k and weights w_k (sum 1) for theta_n * f.

        Offsets form a symmetric midpoint lattice so odd integrands cancel.
        """
        r = 1.0 / n
        m = self.nodes_per_radius
        pts, vol = _midpoint_nodes(np.full(d, -r), np.full(d, r), 2 * m)
        w = self.profile(pts, n) * vol
        keep = w > 0
        pts, w = pts[keep], w[keep]
        return pts, w / w.sum()


def mollify_drift(b, n, family=None, spacing=None):
    """Spatial convolution theta_n * b, tabulated on a uniform grid.

    The table covers the support box of b enlarged by 1/n (the domain box
    if b is unbounded). The active time window, if any, is kept as is.
    """
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise DomainError("mollification index n must be an integer >= 1")
    family = family or MollifierFamily()
    if b.kind == "zero":
        return replace(b, name=f"{b.name}*theta_{n}")
    r = family.radius(n)
    box = b.support_box()
    if box is None:
        lo = np.full(b.d, -b.half_width)
        hi = np.full(b.d, b.half_width)
    else:
        lo, hi = box[0] - r, box[1] + r
    if spacing is None:
        spacing = r / 16.0
    if r < spacing:
        raise ResolutionError(
            f"mollifier radius 1/n = {r:g} is smaller than the tabulation spacing {spacing:g}")
    # odd node counts on a box symmetric about its center keep the center on a node
    counts = tuple(2 * int(math.ceil((h - l) / (2 * spacing))) + 1 for l, h in zip(lo, hi))
    grid = SpatialGrid(tuple(lo), tuple(hi), counts)
    offsets, w = family.weights(n, b.d)
    nodes = grid.points
    # the window is a multiplicative time factor, so evaluate inside it
    t_eval = 0.5 * (b.window[0] + b.window[1]) if b.window is not None else 0.0
    vals = np.zeros_like(nodes)
    chunk = max(1, 400_000 // len(w))
    for s in range(0, nodes.shape[0], chunk):
        x = nodes[s:s + chunk]
        shifted = x[:, None, :] - offsets[None, :, :]
        vals[s:s + chunk] = np.einsum("k,gkd->gd", w, b.evaluate(t_eval, shifted))
    return DriftField("tabulated", d=b.d, half_width=b.half_width, T=b.T, window=b.window,
                      table_grid=grid, table_values=vals.reshape(grid.shape + (b.d,)),
                      mollifier_radius=r, name=f"{b.name}*theta_{n}")
