"""Regular 4-D grids with clamped multilinear interpolation."""
from __future__ import annotations

import itertools

import numpy as np

from . import kernels


class Grid4:
    """Tensor grid over the joint state ``(p_x^r, v_r, p_y^R, p_y^H)``."""

    def __init__(self, lows, highs, counts):
        self.lows = np.asarray(lows, dtype=float)
        self.highs = np.asarray(highs, dtype=float)
        self.counts = tuple(int(c) for c in counts)
        if len(self.counts) != 4 or len(self.lows) != 4 or len(self.highs) != 4:
            raise ValueError("Grid4 needs exactly four dimensions")
        if min(self.counts) < 3:
            raise ValueError("need at least 3 points per dimension")
        if np.any(self.highs <= self.lows):
            raise ValueError("grid bounds must be strictly increasing")
        self.axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lows, self.highs, self.counts)]
        self.spacing = (self.highs - self.lows) / (np.asarray(self.counts) - 1)
        self.shape = self.counts
        self.size = int(np.prod(self.counts))
        strides = np.ones(4, dtype=np.int64)
        for d in range(2, -1, -1):
            strides[d] = strides[d + 1] * self.counts[d + 1]
        self.strides = strides
        bits = np.array(list(itertools.product((0, 1), repeat=4)), dtype=np.int64)
        self._corner_bits = bits
        self._corner_offsets = bits @ strides

    @classmethod
    def from_config(cls, gcfg, counts=None) -> "Grid4":
        return cls(gcfg.lows, gcfg.highs, counts if counts is not None else gcfg.counts)

    def points(self) -> np.ndarray:
        """All grid points in row-major order, shape (size, 4)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.spacing))

    def contains(self, pts, tol: float = 1e-9) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= self.lows - tol) & (pts <= self.highs + tol), axis=-1)

    def same_domain(self, other: "Grid4", tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.lows, other.lows, atol=tol) and np.allclose(self.highs, other.highs, atol=tol))

    def _locate(self, pts):
        t = (pts - self.lows) / self.spacing
        t = np.clip(t, 0.0, np.asarray(self.counts) - 1.0)
        i = np.minimum(np.floor(t).astype(np.int64), np.asarray(self.counts) - 2)
        return i, t - i

    def stencil(self, pts):
        """Flat corner indices and weights, each of shape (P, 16)."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 4)
        i, w = self._locate(pts)
        base = i @ self.strides
        idx = base[:, None] + self._corner_offsets[None, :]
        b = self._corner_bits[None, :, :]
        wt = np.prod(np.where(b == 1, w[:, None, :], 1.0 - w[:, None, :]), axis=-1)
        return idx, wt

    def interp(self, values, pts) -> np.ndarray:
        """Clamped multilinear interpolation.

        ``values`` has shape ``(..., *shape)``; the result has shape
        ``(..., *pts.shape[:-1])``.
        """
        pts = np.asarray(pts, dtype=float)
        lead = values.shape[:-4]
        flat = np.ascontiguousarray(values, dtype=float).reshape((-1,) + self.shape)
        P = np.ascontiguousarray(pts.reshape(-1, 4))
        out = np.empty((flat.shape[0], P.shape[0]))
        kernels.interp4(flat, self.lows, self.spacing, np.asarray(self.counts, dtype=np.int64), P, out)
        return out.reshape(lead + pts.shape[:-1])

    def interp_reference(self, values, pts) -> np.ndarray:
        """Pure-numpy version of :meth:`interp` built from :meth:`stencil`."""
        pts = np.asarray(pts, dtype=float)
        lead = values.shape[:-4]
        idx, wt = self.stencil(pts)
        flat = values.reshape(lead + (-1,))
        out = np.einsum("...pc,pc->...p", flat[..., idx], wt)
        return out.reshape(lead + pts.shape[:-1])

def axis_interp(values: np.ndarray, axis: int, grid_axis: np.ndarray, coords) -> np.ndarray:
    """Linear interpolation along one axis at per-slice target coordinates.

    ``coords`` either has the axis' length (same targets for every slice) or
    broadcasts against ``values`` with the axis kept in place. Targets outside
    the axis are clamped to its end points.
    """
    n = grid_axis.size
    lo, h = grid_axis[0], grid_axis[1] - grid_axis[0]
    t = np.clip((np.asarray(coords, dtype=float) - lo) / h, 0.0, n - 1.0)
    i = np.minimum(np.floor(t).astype(np.intp), n - 2)
    w = t - i
    if t.ndim == 1:
        shape = [1] * values.ndim
        shape[axis] = n
        w = w.reshape(shape)
        return np.take(values, i, axis=axis) * (1.0 - w) + np.take(values, i + 1, axis=axis) * w
    return (np.take_along_axis(values, i, axis=axis) * (1.0 - w)
            + np.take_along_axis(values, i + 1, axis=axis) * w)


def joint_successor_interp(values: np.ndarray, grid: Grid4, uR, uH, dt: float) -> np.ndarray:
    """Interpolate ``values`` at ``f(x, uR, uH)`` for every grid point ``x``.

    Exploits the separable structure of the linear joint model: lateral axes
    shift by constants, ``v_r`` by ``(a_H - a_R) dt`` and ``p_x^r`` by the
    source slice's ``v_r dt``. Leading axes of ``values`` are carried along.
    """
    off = values.ndim - 4
    pyr, pyh = grid.axes[2], grid.axes[3]
    W = axis_interp(values, off + 3, pyh, pyh + uH[0] * dt)
    W = axis_interp(W, off + 2, pyr, pyr + uR[0] * dt)
    return successor_longitudinal(W, grid, (uH[1] - uR[1]) * dt, dt)


def successor_longitudinal(W: np.ndarray, grid: Grid4, dv: float, dt: float) -> np.ndarray:
    off = W.ndim - 4
    px, vr = grid.axes[0], grid.axes[1]
    W = axis_interp(W, off + 1, vr, vr + dv)
    shape = [1] * W.ndim
    shape[off + 0], shape[off + 1] = px.size, vr.size
    coords = (px[:, None] + vr[None, :] * dt).reshape(shape)
    return axis_interp(W, off + 0, px, coords)
