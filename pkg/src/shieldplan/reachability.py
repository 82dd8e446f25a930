"""Safe set, safety policy and the least-restrictive shielding filter.

The safe set is the superlevel set ``{V >= margin}`` of a discrete-time
safety value function computed by value iteration on a 4-D grid:

    V(x) = min( l(x), max_{uR} min_{uH} V(f(x, uR, uH)) )

with ``l`` the signed failure margin and multilinear interpolation between
grid points.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import cache, kernels
from .config import Config, DynamicsConfig, FailureConfig
from .dynamics import human_box, robot_box, step_joint
from .grid import Grid4, axis_interp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FailureSpec:
    sep_long: float = 5.5
    sep_lat: float = 2.0
    road_half_width: float = 3.7
    geometry: str = "highway"

    def __post_init__(self):
        if min(self.sep_long, self.sep_lat, self.road_half_width) <= 0:
            raise ValueError("failure thresholds must be positive")

    @classmethod
    def from_config(cls, fc: FailureConfig) -> "FailureSpec":
        return cls(fc.sep_long, fc.sep_lat, fc.road_half_width, fc.geometry)


def failure_margin(x, spec: FailureSpec) -> np.ndarray:
    """Signed distance-like margin, negative exactly on the failure set.

    Separation clause ``max(|p_x^r| - 5.5, |p_y^R - p_y^H| - 2.0)`` and road
    clause ``3.7 - |p_y^R|``; the margin is their minimum.
    """
    x = np.asarray(x, dtype=float)
    sep = np.maximum(np.abs(x[..., 0]) - spec.sep_long,
                     np.abs(x[..., 2] - x[..., 3]) - spec.sep_lat)
    road = spec.road_half_width - np.abs(x[..., 2])
    return np.minimum(sep, road)


class CertificateError(RuntimeError):
    pass


@dataclass
class SafetyCertificate:
    grid: Grid4
    values: np.ndarray
    uR: np.ndarray
    uH: np.ndarray
    dt: float
    margin: float
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    spec: FailureSpec = field(default_factory=FailureSpec)
    buffer: float = 0.0
    config_hash: str = ""

    # -- queries -----------------------------------------------------------
    def value(self, x) -> np.ndarray:
        return self.grid.interp(self.values, x)

    def in_safe_set(self, x) -> np.ndarray:
        return self.value(x) >= self.margin

    def in_domain(self, x) -> np.ndarray:
        return self.grid.contains(x)

    def cell_bound(self, x) -> np.ndarray:
        """Local one-cell Lipschitz bound: how far V can move inside x's cell.

        Sum over dimensions of the largest value change along an edge of the
        grid cell containing ``x``.
        """
        x = np.asarray(x, dtype=float)
        idx, _ = self.grid.stencil(x)
        c = self.values.ravel()[idx]
        bits = self.grid._corner_bits
        total = np.zeros(len(c))
        for d in range(4):
            lo = np.flatnonzero(bits[:, d] == 0)
            hi = lo + (1 << (3 - d))  # corner index with bit d set
            total += np.abs(c[:, hi] - c[:, lo]).max(axis=1)
        return total.reshape(x.shape[:-1])

    def successor_values(self, x, uR) -> np.ndarray:
        """Values at ``f(x, uR, uH)`` for every ``uH`` in the human lattice.

        ``x`` has shape (..., 4) and ``uR`` (..., 2) or (2,); result (..., nH).
        """
        x = np.asarray(x, dtype=float)
        uR = np.asarray(uR, dtype=float)
        nxt = step_joint(x[..., None, :], uR[..., None, :], self.uH, self.dt)
        return self.value(nxt)

    def action_values(self, x) -> np.ndarray:
        """Worst-case successor value for each robot lattice action, (..., nR)."""
        x = np.asarray(x, dtype=float)
        nxt = step_joint(x[..., None, None, :], self.uR[:, None, :], self.uH[None, :, :], self.dt)
        return self.value(nxt).min(axis=-1)

    def safe_action_index(self, x) -> np.ndarray:
        # np.argmax returns the first maximizer: lowest index wins ties
        return np.argmax(self.action_values(x), axis=-1)

    def safe_action(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(self.in_domain(x)):
            log.warning("safe_action query outside the certificate grid; clamped")
        return self.uR[self.safe_action_index(x)]

    def in_shielding_set(self, x, uR) -> np.ndarray:
        return np.any(self.successor_values(x, uR) < self.margin, axis=-1)

    def shield(self, x, candidate) -> tuple[np.ndarray, bool]:
        """Least-restrictive filter: keep ``candidate`` unless it may leave the safe set."""
        u, shielded, _ = self.shield_verbose(x, candidate)
        return u, shielded

    def shield_verbose(self, x, candidate):
        x = np.asarray(x, dtype=float)
        candidate = np.asarray(candidate, dtype=float)
        if self.value(x) < self.margin:
            log.debug("state outside the safe set; applying the safety policy")
            return self.safe_action(x), True, True
        if self.in_shielding_set(x, candidate):
            return self.safe_action(x), True, False
        return candidate, False, False

    # -- persistence ---------------------------------------------------------
    def header(self) -> dict:
        return {
            "kind": "safety-certificate",
            "lows": self.grid.lows.tolist(),
            "highs": self.grid.highs.tolist(),
            "counts": list(self.grid.counts),
            "uR": self.uR.tolist(),
            "uH": self.uH.tolist(),
            "dt": self.dt,
            "margin": self.margin,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "thresholds": [self.spec.sep_long, self.spec.sep_lat, self.spec.road_half_width],
            "geometry": self.spec.geometry,
            "buffer": self.buffer,
            "config_hash": self.config_hash,
        }

    def save(self, path) -> None:
        cache.write_array(path, self.values, self.header())

    @classmethod
    def load(cls, path, config_hash: str | None = None) -> "SafetyCertificate":
        expect = {"kind": "safety-certificate"}
        if config_hash is not None:
            expect["config_hash"] = config_hash
        values, h = cache.read_array(path, expect)
        grid = Grid4(h["lows"], h["highs"], h["counts"])
        spec = FailureSpec(*h["thresholds"], geometry=h["geometry"])
        return cls(grid, values, np.array(h["uR"]), np.array(h["uH"]), h["dt"], h["margin"],
                   h["iterations"], h["residual"], h["converged"], spec, h["buffer"], h["config_hash"])


def _backup(V: np.ndarray, grid: Grid4, uR: np.ndarray, uH: np.ndarray, dt: float):
    """max over uR of min over uH of V at the successor, for every grid point.

    Also returns the argmax index per grid point (first maximizer).
    """
    pyr, pyh = grid.axes[2], grid.axes[3]
    lat_h = {float(v): axis_interp(V, 3, pyh, pyh + v * dt) for v in np.unique(uH[:, 0])}
    keys: dict[tuple[float, float], int] = {}
    lat = []
    lat_index = np.empty((len(uR), len(uH)), dtype=np.int64)
    dv = np.empty((len(uR), len(uH)))
    for i, ur in enumerate(uR):
        for j, uh in enumerate(uH):
            key = (float(ur[0]), float(uh[0]))
            if key not in keys:
                keys[key] = len(lat)
                lat.append(axis_interp(lat_h[key[1]], 2, pyr, pyr + key[0] * dt))
            lat_index[i, j] = keys[key]
            dv[i, j] = (uh[1] - ur[1]) * dt
    best = np.empty(V.shape)
    arg = np.zeros(V.shape, dtype=np.int64)
    kernels.minmax_backup(np.ascontiguousarray(np.stack(lat)), lat_index, dv,
                          grid.axes[0], grid.axes[1], float(dt), best, arg)
    return best, arg


def edge_changes(values: np.ndarray, floor: float | None = 0.0) -> np.ndarray:
    """Largest change of V across one grid edge, per dimension.

    Only edges with both endpoints in ``{V >= floor}`` count when ``floor``
    is given.
    """
    out = np.zeros(values.ndim)
    for d in range(values.ndim):
        n = values.shape[d]
        a = np.take(values, np.arange(n - 1), axis=d)
        b = np.take(values, np.arange(1, n), axis=d)
        diff = np.abs(a - b)
        if floor is not None:
            diff = diff[(a >= floor) & (b >= floor)]
        if diff.size:
            out[d] = float(diff.max())
    return out


def lipschitz_margin(values: np.ndarray, grid: Grid4, floor: float | None = 0.0) -> float:
    """Finite-difference Lipschitz constant times the cell diagonal."""
    lip = float(np.max(edge_changes(values, floor) / grid.spacing))
    return lip * grid.cell_diagonal


def compute_certificate(dyn: DynamicsConfig, grid: Grid4, spec: FailureSpec, tol: float = 1e-6,
                        max_iter: int = 400, uR: np.ndarray | None = None,
                        uH: np.ndarray | None = None, buffer: float = 0.0,
                        margin: float | str | None = 0.0, target: np.ndarray | None = None,
                        levels: int = 3, raise_on_failure: bool = True,
                        history: list | None = None) -> SafetyCertificate:
    """Value iteration to the discrete-time safety fixed point.

    ``target`` overrides the failure-margin initialization (array on the
    grid). ``history`` collects the iterate after every sweep when given.
    """
    uR = robot_box(dyn).lattice(levels) if uR is None else np.asarray(uR, dtype=float)
    uH = human_box(dyn).lattice(levels) if uH is None else np.asarray(uH, dtype=float)
    if len(uR) == 0 or len(uH) == 0:
        raise CertificateError("discretized control sets must be nonempty")
    if target is None:
        target = failure_margin(grid.points(), spec).reshape(grid.shape) - buffer
    V = np.array(target, dtype=float)
    t0 = time.perf_counter()
    residual = np.inf
    it = 0
    while it < max_iter:
        it += 1
        best, _ = _backup(V, grid, uR, uH, dyn.dt)
        Vn = np.minimum(target, best)
        residual = float(np.max(np.abs(Vn - V)))
        V = Vn
        if history is not None:
            history.append(V.copy())
        if residual <= tol:
            break
    converged = residual <= tol
    log.info("certificate: %d sweeps, residual %.2e, %.1fs", it, residual, time.perf_counter() - t0)
    if margin is None or margin == "lipschitz":
        margin = lipschitz_margin(V, grid)
    cert = SafetyCertificate(grid, V, uR, uH, dyn.dt, float(margin), it, residual, converged,
                             spec, buffer)
    if raise_on_failure:
        if not converged:
            raise CertificateError(f"value iteration did not converge: residual {residual:.3e} after {it} sweeps")
        if not np.any(V >= margin):
            raise CertificateError("safe set is empty on this grid; refine the grid")
    return cert


def certificate_from_config(cfg: Config, **kw) -> SafetyCertificate:
    grid = Grid4.from_config(cfg.reach.grid)
    spec = FailureSpec.from_config(cfg.failure)
    cert = compute_certificate(cfg.dynamics, grid, spec, tol=cfg.reach.tol,
                               max_iter=cfg.reach.max_iter, buffer=cfg.failure.synthesis_buffer,
                               margin=cfg.reach.margin, levels=cfg.reach.lattice_levels, **kw)
    cert.config_hash = cfg.certificate_hash()
    return cert
