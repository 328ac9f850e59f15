"""Error norms, global energies and spherical-harmonic spectra."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import ConfigurationError, DegenerateReferenceError, ShapeError
from .grid import SphericalGrid
from .regrid import stagger_to_centers
from .solver import GRAVITY, PhysicalConstants, SweState, _faces_v, _metrics, relative_vorticity


# -- error norms -----------------------------------------------------------------------
def _pair(sim, ref, grid=None):
    sim = np.asarray(sim, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if sim.shape != ref.shape:
        raise ShapeError(f"sim {sim.shape} and ref {ref.shape} differ")
    if grid is not None:
        grid.check_field(sim, "sim")
    return sim, ref


def l2_norm(sim, ref, grid: SphericalGrid) -> float:
    """``sqrt(S[(sim - ref)^2] / S[ref^2])`` with ``S`` the area-weighted sum."""
    sim, ref = _pair(sim, ref, grid)
    den = np.sum(grid.cell_area * ref**2)
    if den == 0.0:
        raise DegenerateReferenceError("L2 norm undefined: reference field is identically zero")
    return float(np.sqrt(np.sum(grid.cell_area * (sim - ref) ** 2) / den))


def lmax_norm(sim, ref) -> float:
    sim, ref = _pair(sim, ref)
    den = np.max(np.abs(ref))
    if den == 0.0:
        raise DegenerateReferenceError("Lmax norm undefined: reference field is identically zero")
    return float(np.max(np.abs(sim - ref)) / den)


@dataclass
class NormRow:
    field: str
    l2: float
    lmax: float
    degenerate: bool = False


def error_norms(sim: SweState, ref: SweState, grid: SphericalGrid) -> list[NormRow]:
    """Norms of ``h``, ``u``, ``v`` at cell centres.

    A zero reference (``v`` of a zonal flow) yields the unnormalised
    differences, flagged as degenerate.
    """
    us, vs = stagger_to_centers(sim)
    ur, vr = stagger_to_centers(ref)
    rows = []
    for name, a, b in (("h", sim.h, ref.h), ("u", us, ur), ("v", vs, vr)):
        try:
            rows.append(NormRow(name, l2_norm(a, b, grid), lmax_norm(a, b)))
        except DegenerateReferenceError:
            l2 = float(np.sqrt(np.sum(grid.cell_area * (a - b) ** 2) / grid.total_area))
            rows.append(NormRow(name, l2, float(np.max(np.abs(a - b))), degenerate=True))
    return rows


# -- energies ----------------------------------------------------------------------------
def kinetic_energy(state: SweState, grid: SphericalGrid) -> float:
    """``sum_j |u_j|^2 / 2 A_j`` with velocities averaged to centres (no depth weighting)."""
    grid.check_field(state.h, "h")
    uc, vc = stagger_to_centers(state)
    return float(0.5 * np.sum(grid.cell_area * (uc**2 + vc**2)))


def potential_energy(state: SweState, grid: SphericalGrid, consts: PhysicalConstants | None = None) -> float:
    """``g sum_j h_j A_j``, linear in ``h``."""
    g = consts.g if consts is not None else GRAVITY
    return float(g * np.sum(grid.cell_area * grid.check_field(state.h, "h")))


def physical_potential_energy(state: SweState, grid: SphericalGrid,
                              consts: PhysicalConstants | None = None) -> float:
    """Conventional ``sum_j g h_j^2 / 2 A_j`` (flat bottom)."""
    g = consts.g if consts is not None else GRAVITY
    return float(0.5 * g * np.sum(grid.cell_area * grid.check_field(state.h, "h") ** 2))


def total_energy(state: SweState, grid: SphericalGrid, consts: PhysicalConstants | None = None) -> float:
    """Depth-weighted kinetic plus ``g h^2 / 2`` energy, the invariant of the solver."""
    consts = consts or PhysicalConstants()
    met = _metrics(grid, None)
    vf = _faces_v(state)
    k = 0.25 * (met.area_u * state.u**2 + np.roll(met.area_u * state.u**2, 1, axis=1)
                + (met.area_v * vf**2)[1:] + (met.area_v * vf**2)[:-1]) / met.area
    return float(np.sum(grid.cell_area * (state.h * k + 0.5 * consts.g * state.h**2)))


def relative_drift(values):
    """``(E(t) - E(0)) / E(0)`` for a time series."""
    values = np.asarray(values, dtype=float)
    if values[0] == 0.0:
        raise DegenerateReferenceError("initial value is zero")
    return (values - values[0]) / values[0]


# -- vorticity and divergence --------------------------------------------------------------
def vort_div(state: SweState, grid: SphericalGrid):
    """Relative vorticity and divergence at cell centres.

    Divergence is the flux form over each cell; vorticity averages the four
    circulation-based corner values around the cell.
    """
    grid.check_field(state.h, "h")
    met = _metrics(grid, None)
    vf = _faces_v(state)
    fu = state.u * met.dy
    gv = vf * met.len_v
    div = (fu - np.roll(fu, 1, axis=1) + gv[1:] - gv[:-1]) / met.area
    z = relative_vorticity(state, grid)
    zc = 0.25 * (z[:-1] + np.roll(z[:-1], 1, axis=1) + z[1:] + np.roll(z[1:], 1, axis=1))
    return zc, div


# -- spherical harmonics -----------------------------------------------------------------
def gauss_legendre(n: int, tol: float = 1e-14, max_iter: int = 100):
    """Nodes (ascending) and weights of ``n``-point Gauss-Legendre quadrature by Newton iteration."""
    if n < 1:
        raise ConfigurationError("need at least one node")
    k = np.arange(1, n + 1)
    x = np.cos(np.pi * (k - 0.25) / (n + 0.5))
    for _ in range(max_iter):
        p0, p1 = np.ones_like(x), x.copy()
        for j in range(2, n + 1):
            p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
        dp = n * (x * p1 - p0) / (x * x - 1.0)
        dx = p1 / dp
        x = x - dx
        if np.max(np.abs(dx)) < tol:
            break
    p0, p1 = np.ones_like(x), x.copy()
    for j in range(2, n + 1):
        p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return x[order], w[order]


def legendre_table(mu, n_max: int):
    """Orthonormal associated Legendre functions ``P[m, n, j]`` with ``int_{-1}^{1} P^2 dmu = 1``.

    Entries with ``n < m`` are zero. No Condon-Shortley phase.
    """
    mu = np.asarray(mu, dtype=float)
    s = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
    p = np.zeros((n_max + 1, n_max + 1, mu.size))
    pmm = np.full(mu.size, np.sqrt(0.5))
    for m in range(n_max + 1):
        if m > 0:
            pmm = np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * pmm
        p[m, m] = pmm
        if m + 1 <= n_max:
            p[m, m + 1] = np.sqrt(2.0 * m + 3.0) * mu * pmm
        for n in range(m + 2, n_max + 1):
            a = np.sqrt((4.0 * n * n - 1.0) / (n * n - m * m))
            b = np.sqrt(((n - 1.0) ** 2 - m * m) / (4.0 * (n - 1.0) ** 2 - 1.0))
            p[m, n] = a * (mu * p[m, n - 1] - b * p[m, n - 2])
    return p


@lru_cache(maxsize=8)
def _gauss_setup(nlat_g: int, n_max: int):
    mu, w = gauss_legendre(nlat_g)
    ptab = legendre_table(mu, n_max)
    for arr in (mu, w, ptab):
        arr.setflags(write=False)
    return mu, w, ptab


@dataclass
class SpectrumResult:
    n: np.ndarray
    ke: np.ndarray
    en: np.ndarray
    n_max: int
    time: float = 0.0
    run_id: str = ""
    meta: dict = field(default_factory=dict)


def harmonic_power(field_g, n_max: int):
    """Per-degree power of a field on a Gaussian grid ``(nlat_g, nlon)`` (south to north).

    Normalised so that ``sum_n power[n]`` equals the area mean of ``field**2``
    for band-limited fields.
    """
    field_g = np.asarray(field_g, dtype=float)
    nlat_g, nlon = field_g.shape
    if n_max > nlat_g - 1:
        raise ConfigurationError(f"n_max={n_max} exceeds nlat_gauss-1={nlat_g - 1}")
    if n_max > nlon // 2:
        raise ConfigurationError(f"n_max={n_max} exceeds the zonal Nyquist number {nlon // 2}")
    mu, w, ptab = _gauss_setup(nlat_g, n_max)
    fm = np.fft.rfft(field_g, axis=1)[:, :n_max + 1] / nlon          # (nlat_g, m)
    coef = np.einsum("jm,mnj,j->mn", fm, ptab, w)                   # (m, n)
    power = np.abs(coef) ** 2
    power[0] *= 0.5
    return power.sum(axis=0)                                        # (n,)


def gaussian_latitudes(nlat_g: int):
    mu, _ = gauss_legendre(nlat_g)
    return np.arcsin(mu)


def to_gaussian_grid(field, grid: SphericalGrid, nlat_g: int | None = None):
    """Nearest-neighbour interpolation in latitude onto Gaussian latitudes (same longitudes)."""
    field = grid.check_field(field)
    nlat_g = nlat_g or grid.nlat
    lat_g = gaussian_latitudes(nlat_g)
    rows = np.abs(lat_g[:, None] - grid.lat_centers[None, :]).argmin(axis=1)
    return field[rows]


def spectrum_from_gaussian(zeta_g, delta_g, radius: float, n_max: int, time=0.0, run_id=""):
    en_all = harmonic_power(zeta_g, n_max)
    dn_all = harmonic_power(delta_g, n_max)
    n = np.arange(1, n_max + 1)
    en = en_all[1:]
    ke = radius**2 / (n * (n + 1.0)) * (en + dn_all[1:])
    return SpectrumResult(n, ke, en, n_max, time, run_id)


def spherical_spectrum(zeta, delta, grid: SphericalGrid, n_max: int | None = None,
                       time=0.0, run_id="") -> SpectrumResult:
    """Kinetic energy and enstrophy per total wavenumber ``n = 1..n_max``."""
    zeta = grid.check_field(zeta, "zeta")
    delta = grid.check_field(delta, "delta")
    if not (np.all(np.isfinite(zeta)) and np.all(np.isfinite(delta))):
        raise ConfigurationError("non-finite vorticity/divergence")
    nlat_g = grid.nlat
    n_max = nlat_g - 1 if n_max is None else int(n_max)
    return spectrum_from_gaussian(to_gaussian_grid(zeta, grid, nlat_g), to_gaussian_grid(delta, grid, nlat_g),
                                  grid.radius, n_max, time, run_id)


def state_spectrum(state: SweState, grid: SphericalGrid, n_max=None, run_id="") -> SpectrumResult:
    zeta, delta = vort_div(state, grid)
    return spherical_spectrum(zeta, delta, grid, n_max, state.t, run_id)


def slope_fit(spectrum, n_range=None, wavelength_range=None, radius=None) -> float:
    """Least-squares slope of ``log KE_n`` against ``log n``.

    The range is given in degrees ``(n_lo, n_hi)`` or as wavelengths in metres,
    converted with ``n = 2 pi a / wavelength``.
    """
    if isinstance(spectrum, SpectrumResult):
        n, ke = spectrum.n, spectrum.ke
    else:
        ke = np.asarray(spectrum, dtype=float)
        n = np.arange(1, ke.size + 1)
    if wavelength_range is not None:
        if radius is None:
            raise ConfigurationError("radius is required to convert wavelengths")
        lo, hi = sorted(2.0 * np.pi * radius / np.asarray(wavelength_range, dtype=float))
        n_range = (lo, hi)
    sel = np.ones(n.size, dtype=bool) if n_range is None else (n >= n_range[0]) & (n <= n_range[1])
    sel &= ke > 0
    if sel.sum() < 5:
        raise ConfigurationError(f"slope fit needs >= 5 degrees, got {int(sel.sum())}")
    return float(np.polyfit(np.log(n[sel]), np.log(ke[sel]), 1)[0])
