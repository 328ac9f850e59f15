"""Galewsky barotropically unstable jet, with shifted jet and bump variants."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import ConfigurationError, QuadratureError
from .grid import SphericalGrid, area_mean
from .solver import PhysicalConstants, SweState

MEAN_DEPTH = 10000.0


@dataclass(frozen=True)
class GalewskyParams:
    u_max: float = 80.0
    n_phi: int = 0
    n_lambda: int = 0
    h_hat: float = 120.0
    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 15.0
    h0: float | None = None
    perturbed: bool = True

    def __post_init__(self):
        if self.n_phi not in (-1, 0, 1):
            raise ConfigurationError(f"n_phi must be -1, 0 or 1, got {self.n_phi}")
        if self.n_lambda not in range(8):
            raise ConfigurationError(f"n_lambda must be in 0..7, got {self.n_lambda}")

    @property
    def phi0(self) -> float:
        return np.pi / 7.0 - self.n_phi * np.pi / 36.0

    @property
    def phi1(self) -> float:
        return np.pi / 2.0 - self.phi0

    @property
    def e_n(self) -> float:
        return float(np.exp(-4.0 / (self.phi1 - self.phi0) ** 2))

    @property
    def lambda2(self) -> float:
        return self.n_lambda * np.pi / 4.0 - np.pi

    @property
    def phi2(self) -> float:
        return np.pi / 4.0 - self.n_phi * np.pi / 36.0


def jet_profile(phi, params: GalewskyParams):
    """Zonal wind (m/s); zero outside the open interval ``(phi0, phi1)``."""
    phi = np.asarray(phi, dtype=float)
    p0, p1 = params.phi0, params.phi1
    inside = (phi > p0) & (phi < p1)
    denom = np.where(inside, (phi - p0) * (phi - p1), -1.0)
    with np.errstate(under="ignore"):
        u = np.where(inside, params.u_max / params.e_n * np.exp(1.0 / denom), 0.0)
    return u if u.ndim else float(u)


def romberg(f, lo: float, hi: float, tol: float = 1e-10, max_levels: int = 20) -> float:
    """Romberg integration of a vectorised ``f`` over ``[lo, hi]``.

    Stops when two successive diagonal entries agree to ``tol`` relative (or
    absolute, when the integral is near zero).
    """
    if hi < lo:
        raise ValueError("romberg requires lo <= hi")
    if hi == lo:
        return 0.0
    width = hi - lo
    prev_row = [0.5 * width * (float(f(np.array([lo]))[0]) + float(f(np.array([hi]))[0]))]
    for level in range(1, max_levels):
        n_new = 2 ** (level - 1)
        step = width / n_new
        mids = lo + step * (np.arange(n_new) + 0.5)
        row = [0.5 * prev_row[0] + 0.5 * step * float(np.sum(f(mids)))]
        for k in range(1, level + 1):
            fac = 4.0**k
            row.append(row[k - 1] + (row[k - 1] - prev_row[k - 1]) / (fac - 1.0))
        diff = abs(row[-1] - prev_row[-1])
        if level >= 2 and diff <= tol * max(abs(row[-1]), 1e-300):
            return row[-1]
        if level >= 2 and row[-1] == 0.0 and prev_row[-1] == 0.0:
            return 0.0
        prev_row = row
    raise QuadratureError(
        f"Romberg did not converge in {max_levels} levels: last estimates "
        f"{prev_row[-2]!r}, {prev_row[-1]!r}", estimates=(prev_row[-2], prev_row[-1]))


def _integrand(params: GalewskyParams, consts: PhysicalConstants, radius: float):
    def f(phi):
        phi = np.asarray(phi, dtype=float)
        u = jet_profile(phi, params)
        out = np.zeros_like(phi)
        nz = u != 0.0
        p = phi[nz]
        out[nz] = radius * u[nz] * (2.0 * consts.Omega * np.sin(p) + np.tan(p) / radius * u[nz])
        return out
    return f


def height_integral(phi: float, params: GalewskyParams, consts: PhysicalConstants,
                    radius: float, tol: float = 1e-10) -> float:
    """``int_{-pi/2}^{phi} a u (f + u tan / a) dphi'`` restricted to the jet support."""
    lo = params.phi0
    hi = min(float(phi), params.phi1)
    if hi <= lo:
        return 0.0
    return romberg(_integrand(params, consts, radius), lo, hi, tol=tol)


def balanced_height(phi, params: GalewskyParams, consts: PhysicalConstants | None = None,
                    radius: float = 6.371e6, h0: float | None = None):
    consts = consts or PhysicalConstants()
    base = h0 if h0 is not None else (params.h0 if params.h0 is not None else consts.h0)
    phi_arr = np.atleast_1d(np.asarray(phi, dtype=float))
    vals = np.array([base - height_integral(p, params, consts, radius) / consts.g for p in phi_arr])
    return vals.reshape(np.shape(phi)) if np.ndim(phi) else float(vals[0])


def perturbation(lam, phi, params: GalewskyParams):
    """Height bump; the longitude offset wraps to ``[-pi, pi)``."""
    lam = np.asarray(lam, dtype=float)
    phi = np.asarray(phi, dtype=float)
    dlam = np.mod(lam - params.lambda2 + np.pi, 2.0 * np.pi) - np.pi
    with np.errstate(under="ignore"):
        out = (params.h_hat * np.exp(-(dlam / params.alpha) ** 2)
               * np.exp(-((params.phi2 - phi) / params.beta) ** 2) * np.cos(phi))
    return out if out.ndim else float(out)


@lru_cache(maxsize=64)
def _row_integrals(lats: tuple, params_key: tuple, consts_key: tuple, radius: float):
    params = GalewskyParams(*params_key)
    consts = PhysicalConstants(g=consts_key[0], Omega=consts_key[1])
    out = np.array([height_integral(p, params, consts, radius) for p in lats])
    out.setflags(write=False)
    return out


def _params_key(params):
    # the zonal jet does not depend on the bump location or h0
    return (params.u_max, params.n_phi, 0)


def calibrate_h0(grid: SphericalGrid, params: GalewskyParams, consts: PhysicalConstants,
                 mean_depth: float = MEAN_DEPTH) -> float:
    """Reference depth giving the unperturbed height the requested area mean.

    The balanced height is affine in ``h0`` with unit slope, so the root of
    ``mean(h) - mean_depth`` is found exactly in one evaluation.
    """
    integ = _row_integrals(tuple(grid.lat_centers), _params_key(params),
                           (consts.g, consts.Omega), grid.radius)
    dh = -integ / consts.g
    return float(mean_depth - area_mean(np.repeat(dh[:, None], grid.nlon, axis=1), grid))


def init_state(grid: SphericalGrid, params: GalewskyParams | None = None,
               consts: PhysicalConstants | None = None) -> SweState:
    params = params or GalewskyParams()
    consts = consts or PhysicalConstants()
    integ = _row_integrals(tuple(grid.lat_centers), _params_key(params),
                           (consts.g, consts.Omega), grid.radius)
    h0 = params.h0 if params.h0 is not None else calibrate_h0(grid, params, consts)
    h_row = h0 - integ / consts.g
    h = np.repeat(h_row[:, None], grid.nlon, axis=1)
    if params.perturbed:
        lat, lon = grid.points("center")
        h = h + perturbation(lon, lat, params)
    u = np.repeat(jet_profile(grid.lat_centers, params)[:, None], grid.nlon, axis=1)
    return SweState(h, u, np.zeros(grid.shape), 0.0)
