"""Uniform tensor grids and multilinear interpolation on them."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform tensor-product grid on the box ``[lo, hi]``.

    Non-periodic grids include both endpoints (``n`` nodes per axis,
    spacing ``(hi - lo) / (n - 1)``). Periodic grids drop the right
    endpoint, which is identified with ``lo`` (spacing ``(hi - lo) / n``).
    """

    lo: tuple
    hi: tuple
    n: tuple
    periodic: bool = False

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        if not len(lo) == len(hi) == len(n):
            raise DomainError("lo, hi and n must have the same length")
        if any(h <= l for l, h in zip(lo, hi)):
            raise DomainError("grid requires hi > lo on every axis")
        if any(k < 2 for k in n):
            raise DomainError("grid requires at least 2 nodes per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "periodic", bool(self.periodic))

    @classmethod
    def box(cls, half_width, n, d=1, periodic=False, center=0.0):
        c = np.broadcast_to(np.asarray(center, dtype=float), (d,))
        return cls(tuple(c - half_width), tuple(c + half_width), (n,) * d, periodic)

    @property
    def d(self):
        return len(self.n)

    @property
    def shape(self):
        return self.n

    @property
    def size(self):
        return int(np.prod(self.n))

    @property
    def spacing(self):
        if self.periodic:
            return tuple((h - l) / k for l, h, k in zip(self.lo, self.hi, self.n))
        return tuple((h - l) / (k - 1) for l, h, k in zip(self.lo, self.hi, self.n))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @cached_property
    def axes(self):
        return tuple(l + np.arange(k) * h for l, k, h in zip(self.lo, self.n, self.spacing))

    @cached_property
    def mesh(self):
        """Coordinates with shape ``(*shape, d)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @cached_property
    def points(self):
        """Flattened node coordinates ``(size, d)`` in C order."""
        return self.mesh.reshape(-1, self.d)

    def refine(self):
        """Grid with half the spacing on the same box."""
        if self.periodic:
            return SpatialGrid(self.lo, self.hi, tuple(2 * k for k in self.n), True)
        return SpatialGrid(self.lo, self.hi, tuple(2 * k - 1 for k in self.n), False)

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "n": list(self.n),
                "periodic": self.periodic}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["lo"]), tuple(data["hi"]), tuple(data["n"]),
                   bool(data.get("periodic", False)))

    def contains(self, points, margin=0.0):
        """Boolean mask of points inside ``[lo + margin, hi - margin]``."""
        p = np.asarray(points, dtype=float)
        if self.periodic:
            return np.ones(p.shape[:-1], dtype=bool)
        lo = np.asarray(self.lo) + margin
        hi = np.asarray(self.hi) - margin
        return np.all((p >= lo) & (p <= hi), axis=-1)


def interpolate(values, grid, points, fill=0.0):
    """Multilinear interpolation of nodal ``values`` at ``points``.

    ``values`` has shape ``(*grid.shape, *tail)``, ``points`` has shape
    ``(..., d)``; the result has shape ``(..., *tail)``. Points outside a
    non-periodic grid receive ``fill``; periodic grids wrap.
    """
    values = np.asarray(values, dtype=float)
    pts = np.asarray(points, dtype=float)
    d = grid.d
    if pts.shape[-1] != d:
        raise DomainError(f"points have dimension {pts.shape[-1]}, grid has {d}")
    tail = values.shape[d:]
    lead = pts.shape[:-1]
    flat = pts.reshape(-1, d)
    idx0 = []
    frac = []
    inside = np.ones(flat.shape[0], dtype=bool)
    for ax in range(d):
        h = grid.spacing[ax]
        s = (flat[:, ax] - grid.lo[ax]) / h
        n = grid.n[ax]
        if grid.periodic:
            s = np.mod(s, n)
            i = np.floor(s).astype(np.intp)
            i = np.minimum(i, n - 1)
        else:
            inside &= (s >= 0.0) & (s <= n - 1)
            s = np.clip(s, 0.0, n - 1)
            i = np.minimum(np.floor(s).astype(np.intp), n - 2)
        idx0.append(i)
        frac.append(s - i)
    out = np.zeros((flat.shape[0],) + tail)
    for corner in itertools.product((0, 1), repeat=d):
        weight = np.ones(flat.shape[0])
        index = []
        for ax, c in enumerate(corner):
            weight = weight * (frac[ax] if c else 1.0 - frac[ax])
            j = idx0[ax] + c
            if grid.periodic:
                j = np.mod(j, grid.n[ax])
            index.append(j)
        vals = values[tuple(index)]
        out += weight.reshape((-1,) + (1,) * len(tail)) * vals
    if not grid.periodic and not np.all(inside):
        out[~inside] = fill
    return out.reshape(lead + tail)


def central_gradient(values, grid, nbatch=0):
    """Central-difference gradient along the spatial axes.

    ``values`` has shape ``(*batch, *grid.shape)`` with ``nbatch`` leading
    batch axes. Returns shape ``(*batch, *grid.shape, d)``. Non-periodic
    boundaries use one-sided first-order differences.
    """
    values = np.asarray(values, dtype=float)
    comps = []
    for ax in range(grid.d):
        axis = nbatch + ax
        h = grid.spacing[ax]
        if grid.periodic:
            g = (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2 * h)
        else:
            g = np.gradient(values, h, axis=axis, edge_order=1)
        comps.append(g)
    return np.stack(comps, axis=-1)


def second_difference(values, grid, axis_i, axis_j, nbatch=0):
    """Second derivative d^2/dx_i dx_j by central differences.

    Pure derivatives use the three-point stencil; non-periodic boundary
    nodes copy their inner neighbour. Mixed derivatives are central
    differences of central differences.
    """
    values = np.asarray(values, dtype=float)
    if axis_i != axis_j:
        gi = central_gradient(values, grid, nbatch)[..., axis_i]
        return central_gradient(gi, grid, nbatch)[..., axis_j]
    axis = nbatch + axis_i
    h = grid.spacing[axis_i]
    if grid.periodic:
        return (np.roll(values, -1, axis=axis) - 2 * values + np.roll(values, 1, axis=axis)) / h**2
    out = np.empty_like(values)
    n = values.shape[axis]

    def sl(a, b):
        s = [slice(None)] * values.ndim
        s[axis] = slice(a, b)
        return tuple(s)

    out[sl(1, n - 1)] = (values[sl(2, n)] - 2 * values[sl(1, n - 1)] + values[sl(0, n - 2)]) / h**2
    out[sl(0, 1)] = out[sl(1, 2)]
    out[sl(n - 1, n)] = out[sl(n - 2, n - 1)]
    return out


def laplacian(values, grid, nbatch=0):
    return sum(second_difference(values, grid, a, a, nbatch) for a in range(grid.d))
