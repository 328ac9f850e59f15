"""Vector-invariant shallow-water solver on the spherical C-grid.

Continuity is in flux form, so the global mass tendency telescopes to zero.
The rotational term uses Sadourny's energy-conserving potential-vorticity
flux; together with the area-weighted kinetic energy in the Bernoulli function
the semi-discrete scheme conserves total energy (up to the polar filter).

High-latitude rows are stabilised with a zonal Fourier filter applied to the
tendencies, the usual fix for the converging meridians of a lat-lon grid. The
filter leaves the zonal mean of every row untouched, so mass conservation is
not affected.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numba
import numpy as np

from .exceptions import CFLError, ConfigurationError, InstabilityError, ShapeError
from .grid import SphericalGrid

log = logging.getLogger(__name__)

GRAVITY = 9.80616
OMEGA = 7.292e-5
CFL_LIMIT = 0.5


@dataclass(frozen=True)
class PhysicalConstants:
    g: float = GRAVITY
    Omega: float = OMEGA
    b: float | np.ndarray = 0.0
    h0: float = 10000.0

    def __post_init__(self):
        if not self.g > 0:
            raise ConfigurationError("gravity must be positive")
        if not self.Omega >= 0:
            raise ConfigurationError("rotation rate must be non-negative")
        if not np.all(np.isfinite(self.b)):
            raise ConfigurationError("topography must be finite")


@dataclass
class SweState:
    """Prognostic fields; ``v[-1]`` is the north-pole face and stays zero."""

    h: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if not (self.h.shape == self.u.shape == self.v.shape) or self.h.ndim != 2:
            raise ShapeError(
                f"h, u, v must share a 2-D shape, got {self.h.shape}, {self.u.shape}, {self.v.shape}"
            )

    @property
    def shape(self):
        return self.h.shape

    def copy(self) -> "SweState":
        return SweState(self.h.copy(), self.u.copy(), self.v.copy(), self.t)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.h).all() and np.isfinite(self.u).all()
                    and np.isfinite(self.v).all())

    def bitwise_equal(self, other: "SweState") -> bool:
        return (self.t == other.t and np.array_equal(self.h, other.h)
                and np.array_equal(self.u, other.u) and np.array_equal(self.v, other.v))


def rest_state(grid: SphericalGrid, h0: float = 10000.0) -> SweState:
    z = np.zeros(grid.shape)
    return SweState(np.full(grid.shape, float(h0)), z, z.copy(), 0.0)


class _Metrics:
    """Geometry factors of the discrete operators, broadcastable to the grid."""

    def __init__(self, grid: SphericalGrid, filter_lat: Optional[float]):
        a = grid.radius
        self.grid = grid
        self.area = grid.row_area[:, None]
        self.dy = a * grid.dlat
        # u points carry the full row area so uniform flow has K = u^2/2 exactly
        self.area_u = self.area
        self.dx_u = self.area_u / self.dy
        cos_e = np.cos(grid.lat_edges)
        cos_e[0] = cos_e[-1] = 0.0
        self.len_v = (a * grid.dlon * cos_e)[:, None]           # (nlat+1, 1) face lengths
        self.area_v = self.len_v * self.dy
        sin_e = np.sin(grid.lat_edges)
        self.f_corner = None  # filled per constants
        self.sin_corner = sin_e[1:-1, None]
        # corner thickness weights (interior corners only)
        ra = grid.row_area
        self.wc_s = (ra[:-1] / (2.0 * (ra[:-1] + ra[1:])))[:, None]
        self.wc_n = (ra[1:] / (2.0 * (ra[:-1] + ra[1:])))[:, None]
        self.corner_area_int = grid.corner_area[1:-1, :1]
        self.filter_lat = filter_lat
        self.filters = self._build_filters(grid, filter_lat)
        self.dx_eff = self._effective_dx(grid, filter_lat)

    @staticmethod
    def _filter_rows(grid, lats, filter_lat):
        if filter_lat is None:
            return None
        cos_cut = np.cos(np.deg2rad(filter_lat))
        k = np.arange(grid.nlon // 2 + 1)
        s = np.abs(np.sin(0.5 * k * grid.dlon))
        rows = np.nonzero(np.cos(lats) < cos_cut - 1e-15)[0]
        if rows.size == 0:
            return None
        with np.errstate(divide="ignore"):
            damp = np.minimum(1.0, np.cos(lats[rows])[:, None] / (cos_cut * s[None, :]))
        damp[:, 0] = 1.0
        return rows, damp

    def _build_filters(self, grid, filter_lat):
        if filter_lat is not None and not 0.0 < filter_lat < 90.0:
            raise ConfigurationError("filter_lat must lie in (0, 90) degrees")
        lat_v = grid.lat_edges[1:-1]  # interior v faces, i.e. v[:-1]
        return {
            "h": self._filter_rows(grid, grid.lat_centers, filter_lat),
            "v": self._filter_rows(grid, lat_v, filter_lat),
        }

    @staticmethod
    def _effective_dx(grid, filter_lat):
        """Smallest zonal spacing per centre row seen by the stability bound."""
        dx = grid.row_area / (grid.radius * grid.dlat)
        if filter_lat is not None:
            floor = grid.radius * np.cos(np.deg2rad(filter_lat)) * grid.dlon
            dx = np.maximum(dx, floor)
        return dx


@lru_cache(maxsize=16)
def _metrics(grid: SphericalGrid, filter_lat: Optional[float]) -> _Metrics:
    return _Metrics(grid, filter_lat)


def _shift_w(x):
    """Value of the western neighbour, periodic in longitude."""
    return np.roll(x, 1, axis=1)


def _shift_e(x):
    return np.roll(x, -1, axis=1)


def _faces_v(state: SweState) -> np.ndarray:
    """Meridional velocity on all ``nlat + 1`` faces including both poles."""
    n, m = state.shape
    vf = np.zeros((n + 1, m))
    vf[1:-1] = state.v[:-1]
    return vf


def relative_vorticity(state: SweState, grid: SphericalGrid) -> np.ndarray:
    """Relative vorticity at the ``(nlat + 1, nlon)`` corners from circulation.

    Rows 0 and ``nlat`` hold the polar-cap values repeated along longitude.
    """
    grid.check_field(state.h, "h")
    met = _metrics(grid, None)
    return _vorticity(state.u, _faces_v(state), met, grid)


def _vorticity(u, vf, met, grid):
    n, m = grid.shape
    ul = u * met.dx_u                        # circulation contribution along latitude
    zeta = np.empty((n + 1, m))
    # corner (k, i+1/2): south edge u[k-1], north edge u[k], west v[k,i], east v[k,i+1]
    circ = ul[:-1] - ul[1:] + met.dy * (_shift_e(vf[1:-1]) - vf[1:-1])
    zeta[1:-1] = circ / met.corner_area_int
    cap_n = np.sum(ul[-1]) / (grid.corner_area[-1, 0] * m)
    cap_s = -np.sum(ul[0]) / (grid.corner_area[0, 0] * m)
    zeta[-1] = cap_n
    zeta[0] = cap_s
    return zeta


def kinetic_energy_centers(u, v_faces, met):
    """Area-weighted mean of squared face velocities around each cell."""
    u2 = met.area_u * u * u
    v2 = met.area_v * v_faces * v_faces
    return 0.25 * (u2 + _shift_w(u2) + v2[1:] + v2[:-1]) / met.area


def bernoulli(state: SweState, consts: PhysicalConstants, grid: SphericalGrid | None = None) -> np.ndarray:
    """``g (h + b) + K`` at cell centres.

    ``K`` averages the squared face velocities with area weights, which is the
    form that makes the discrete energy budget close. Without a grid the faces
    are weighted equally (a flat-geometry approximation).
    """
    if grid is None:
        u2 = state.u**2
        vf = _faces_v(state)
        v2 = vf**2
        k = 0.25 * (u2 + _shift_w(u2) + v2[1:] + v2[:-1])
    else:
        grid.check_field(state.h, "h")
        k = kinetic_energy_centers(state.u, _faces_v(state), _metrics(grid, None))
    return consts.g * (state.h + consts.b) + k


def _check_finite(state):
    if not state.is_finite():
        raise InstabilityError("non-finite values in state", time=state.t)


def _apply_filter(tend, spec):
    if spec is None:
        return
    rows, damp = spec
    spectrum = np.fft.rfft(tend[rows], axis=1)
    spectrum *= damp
    tend[rows] = np.fft.irfft(spectrum, n=tend.shape[1], axis=1)


@numba.njit(cache=True)
def _tendencies_kernel(h, u, v, b, g, dy, dx_u, area, area_u, len_v, area_v, corner_area,
                       wc_s, wc_n, f_corner, dh, du, dv):
    n, m = h.shape
    flux_u = np.empty((n, m))
    flux_v = np.zeros((n + 1, m))
    bern = np.empty((n, m))
    q = np.zeros((n + 1, m))
    for j in range(n):
        for i in range(m):
            e = i + 1 if i + 1 < m else 0
            flux_u[j, i] = 0.5 * (h[j, i] + h[j, e]) * u[j, i] * dy
    for k in range(1, n):
        for i in range(m):
            flux_v[k, i] = 0.5 * (h[k, i] + h[k - 1, i]) * v[k - 1, i] * len_v[k]
    for j in range(n):
        for i in range(m):
            w = i - 1 if i > 0 else m - 1
            dh[j, i] = -((flux_u[j, i] - flux_u[j, w]) + (flux_v[j + 1, i] - flux_v[j, i])) / area[j]
            vn = v[j, i] if j < n - 1 else 0.0
            vs = v[j - 1, i] if j > 0 else 0.0
            ke = 0.25 * (area_u[j] * (u[j, i] * u[j, i] + u[j, w] * u[j, w])
                         + area_v[j + 1] * vn * vn + area_v[j] * vs * vs) / area[j]
            bern[j, i] = g * (h[j, i] + b[j, i]) + ke
    for k in range(1, n):
        for i in range(m):
            e = i + 1 if i + 1 < m else 0
            circ = (u[k - 1, i] * dx_u[k - 1] - u[k, i] * dx_u[k]
                    + dy * (v[k - 1, e] - v[k - 1, i]))
            zeta = circ / corner_area[k]
            hc = wc_s[k - 1] * (h[k - 1, i] + h[k - 1, e]) + wc_n[k - 1] * (h[k, i] + h[k, e])
            q[k, i] = (f_corner[k] + zeta) / hc
    for j in range(n):
        for i in range(m):
            e = i + 1 if i + 1 < m else 0
            pn = q[j + 1, i] * (flux_v[j + 1, i] + flux_v[j + 1, e])
            ps = q[j, i] * (flux_v[j, i] + flux_v[j, e])
            du[j, i] = (0.25 * (pn + ps) - (bern[j, e] - bern[j, i])) / dx_u[j]
    for i in range(m):
        dv[n - 1, i] = 0.0
    for k in range(1, n):
        for i in range(m):
            w = i - 1 if i > 0 else m - 1
            pe = q[k, i] * (flux_u[k - 1, i] + flux_u[k, i])
            pw = q[k, w] * (flux_u[k - 1, w] + flux_u[k, w])
            dv[k - 1, i] = (-0.25 * (pe + pw) - (bern[k, i] - bern[k - 1, i])) / dy


@numba.njit(cache=True)
def _axpy(x, a, y):
    out = np.empty_like(x)
    for j in range(x.shape[0]):
        for i in range(x.shape[1]):
            out[j, i] = x[j, i] + a * y[j, i]
    return out


@numba.njit(cache=True)
def _rk4_combine(x, w, k1, k2, k3, k4):
    out = np.empty_like(x)
    for j in range(x.shape[0]):
        for i in range(x.shape[1]):
            out[j, i] = x[j, i] + w * (k1[j, i] + 2.0 * (k2[j, i] + k3[j, i]) + k4[j, i])
    return out


@numba.njit(cache=True)
def _all_finite(h, u, v):
    acc = 0.0
    for j in range(h.shape[0]):
        for i in range(h.shape[1]):
            acc += h[j, i] * 0.0 + u[j, i] * 0.0 + v[j, i] * 0.0
    return acc == 0.0


def _tendencies_numpy(h, u, v, met, consts, f_corner):
    """Array-expression version of the kernel, kept as a readable reference."""
    n, m = h.shape
    g = consts.g
    vf = np.zeros((n + 1, m))
    vf[1:-1] = v[:-1]

    h_e = _shift_e(h)
    flux_u = 0.5 * (h + h_e) * u * met.dy                                   # m^3/s through east faces
    flux_v = np.zeros((n + 1, m))
    flux_v[1:-1] = 0.5 * (h[1:] + h[:-1]) * vf[1:-1] * met.len_v[1:-1]       # through north faces

    dh = -((flux_u - _shift_w(flux_u)) + (flux_v[1:] - flux_v[:-1])) / met.area

    bern = g * (h + consts.b) + kinetic_energy_centers(u, vf, met)

    zeta = _vorticity(u, vf, met, met.grid)[1:-1]
    h_corner = met.wc_s * (h[:-1] + _shift_e(h[:-1])) + met.wc_n * (h[1:] + _shift_e(h[1:]))
    q = np.zeros((n + 1, m))
    q[1:-1] = (f_corner + zeta) / h_corner

    # energy-conserving PV fluxes
    pv_v = q * (flux_v + _shift_e(flux_v))            # at corners, (n+1, m)
    du = (0.25 * (pv_v[1:] + pv_v[:-1]) - (_shift_e(bern) - bern)) / met.dx_u

    pv_u = q[1:-1] * (flux_u[:-1] + flux_u[1:])      # interior corners, (n-1, m)
    dv = np.zeros((n, m))
    dv[:-1] = (-0.25 * (pv_u + _shift_w(pv_u)) - (bern[1:] - bern[:-1])) / met.dy
    return dh, du, dv


class ShallowWaterModel:
    """Explicit RK4 integrator bound to a grid and a set of constants.

    Parameters
    ----------
    grid : SphericalGrid
    consts : PhysicalConstants
    filter_lat : float or None
        Latitude (degrees) poleward of which the zonal Fourier filter acts.
        ``None`` disables it; the stability bound then sees the full polar
        row spacing.
    check_cfl : bool
        Validate the Courant number before every step.
    backend : {"numba", "numpy"}
        Fused compiled kernel (default) or the array-expression reference.
    """

    def __init__(self, grid: SphericalGrid, consts: PhysicalConstants | None = None,
                 filter_lat: Optional[float] = 60.0, check_cfl: bool = True,
                 backend: str = "numba"):
        self.grid = grid
        self.consts = consts or PhysicalConstants()
        if np.ndim(self.consts.b) and np.shape(self.consts.b) != grid.shape:
            raise ShapeError("topography shape does not match grid")
        self.filter_lat = filter_lat
        self.check_cfl = check_cfl
        self._met = _metrics(grid, filter_lat)
        self._f_corner = 2.0 * self.consts.Omega * self._met.sin_corner
        if backend not in ("numba", "numpy"):
            raise ConfigurationError(f"unknown backend {backend!r}")
        self.backend = backend
        met = self._met
        f_full = np.zeros(grid.nlat + 1)
        f_full[1:-1] = self._f_corner[:, 0]
        ca = np.ascontiguousarray(grid.corner_area[:, 0])
        self._kernel_args = (
            float(met.dy), met.dx_u[:, 0].copy(), met.area[:, 0].copy(), met.area_u[:, 0].copy(),
            met.len_v[:, 0].copy(), met.area_v[:, 0].copy(), ca,
            met.wc_s[:, 0].copy(), met.wc_n[:, 0].copy(), f_full,
        )
        self._b = np.broadcast_to(np.asarray(self.consts.b, dtype=float), grid.shape)
        self.nsteps = 0

    # -- spatial operator -------------------------------------------------
    def tendencies(self, state: SweState, filtered: bool = True):
        self.grid.check_field(state.h, "h")
        _check_finite(state)
        return self._tendencies(state.h, state.u, state.v, filtered)

    def _tendencies(self, h, u, v, filtered=True):
        if self.backend == "numba":
            dh = np.empty(h.shape)
            du = np.empty(h.shape)
            dv = np.empty(h.shape)
            _tendencies_kernel(h, u, v, self._b, self.consts.g, *self._kernel_args, dh, du, dv)
        else:
            dh, du, dv = _tendencies_numpy(h, u, v, self._met, self.consts, self._f_corner)
        if filtered:
            _apply_filter(dh, self._met.filters["h"])
            _apply_filter(du, self._met.filters["h"])
            if self._met.filters["v"] is not None:
                _apply_filter(dv[:-1], self._met.filters["v"])
        return dh, du, dv

    # -- time stepping ----------------------------------------------------
    def courant(self, state: SweState, dt: float):
        """Return ``(courant_number, limiting_row)``."""
        c = np.sqrt(self.consts.g * float(np.max(state.h))) + max(
            float(np.max(np.abs(state.u))), float(np.max(np.abs(state.v))))
        dx = np.minimum(self._met.dx_eff, self.grid.radius * self.grid.dlat)
        row = int(np.argmin(dx))
        return c * dt / dx[row], row

    def max_stable_dt(self, state: SweState) -> float:
        cfl, _ = self.courant(state, 1.0)
        return CFL_LIMIT / cfl

    def step(self, state: SweState, dt: float) -> SweState:
        if not dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.check_cfl:
            cfl, row = self.courant(state, dt)
            if cfl > CFL_LIMIT:
                raise CFLError(
                    f"Courant number {cfl:.3f} exceeds {CFL_LIMIT} (limiting row {row}, "
                    f"lat {np.rad2deg(self.grid.lat_centers[row]):.2f} deg)", row=row, courant=cfl)
        fields = (state.h, state.u, state.v)
        k1 = self._tendencies(*fields)
        k2 = self._tendencies(*[_axpy(x, 0.5 * dt, k) for x, k in zip(fields, k1)])
        k3 = self._tendencies(*[_axpy(x, 0.5 * dt, k) for x, k in zip(fields, k2)])
        k4 = self._tendencies(*[_axpy(x, dt, k) for x, k in zip(fields, k3)])
        w = dt / 6.0
        new = SweState(*[_rk4_combine(x, w, a, b, c, d) for x, a, b, c, d in zip(fields, k1, k2, k3, k4)],
                       t=state.t + dt)
        self.nsteps += 1
        if not _all_finite(new.h, new.u, new.v):
            raise InstabilityError(f"non-finite state after step {self.nsteps} (t={new.t:.1f} s)",
                                   step=self.nsteps, time=new.t)
        return new

    def integrate(self, state: SweState, dt: float, t_end: float,
                  hook: Optional[Callable[[SweState], None]] = None,
                  hook_interval: Optional[float] = None) -> SweState:
        """Step from ``state.t`` to ``t_end``; call ``hook`` every ``hook_interval`` seconds.

        The hook receives a copy taken right after the step that lands on each
        multiple of the interval (the initial time is not reported).
        """
        nsteps = _count(t_end - state.t, dt, "integration span")
        every = None
        if hook is not None:
            every = _count(hook_interval if hook_interval is not None else dt, dt, "hook interval")
            if every == 0:
                raise ConfigurationError("hook interval must be positive")
        for n in range(1, nsteps + 1):
            try:
                state = self.step(state, dt)
            except (CFLError, InstabilityError) as err:
                err.args = (f"{err.args[0]} [failed at t={state.t + dt:.1f} s]",)
                if isinstance(err, InstabilityError):
                    err.time = state.t + dt
                raise
            if every and n % every == 0:
                hook(state.copy())
        return state


def _count(span: float, dt: float, what: str) -> int:
    if span < 0:
        raise ConfigurationError(f"{what} is negative")
    n = span / dt
    k = int(round(n))
    if abs(n - k) > 1e-9 * max(1.0, n):
        raise ConfigurationError(f"{what} {span} s is not a multiple of dt={dt} s")
    return k


# functional façade -------------------------------------------------------------
def tendencies(state: SweState, grid: SphericalGrid, consts: PhysicalConstants,
               filter_lat: Optional[float] = None):
    return ShallowWaterModel(grid, consts, filter_lat=filter_lat, check_cfl=False).tendencies(state)


def step(state: SweState, dt: float, grid: SphericalGrid, consts: PhysicalConstants,
         filter_lat: Optional[float] = 60.0) -> SweState:
    return ShallowWaterModel(grid, consts, filter_lat=filter_lat).step(state, dt)


def integrate(state: SweState, dt: float, t_end: float, grid: SphericalGrid,
              consts: PhysicalConstants, snapshot_hook=None, hook_interval=None,
              filter_lat: Optional[float] = 60.0) -> SweState:
    model = ShallowWaterModel(grid, consts, filter_lat=filter_lat)
    return model.integrate(state, dt, t_end, snapshot_hook, hook_interval)


def total_mass(state: SweState, grid: SphericalGrid) -> float:
    return float(np.sum(grid.cell_area * state.h))
