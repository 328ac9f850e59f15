"""Latitude-longitude Arakawa C-grid on the sphere.

Layout (``nlat`` rows south to north, ``nlon`` columns west to east):

* ``h`` at cell centres ``(lat_centers[j], lon_centers[i])``
* ``u`` on east faces ``(lat_centers[j], lon_centers[i] + dlon/2)``
* ``v`` on north faces ``(lat_edges[j + 1], lon_centers[i])``; the last row is
  the north pole and is held at zero, the south pole face is implicit.
* corners (vorticity points) at ``(lat_edges[k], lon_centers[i] + dlon/2)`` for
  ``k = 0..nlat``; rows ``0`` and ``nlat`` are the poles.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, ShapeError

EARTH_RADIUS = 6.371e6


@dataclass(frozen=True, eq=False)
class SphericalGrid:
    nlat: int
    nlon: int
    radius: float
    lat_centers: np.ndarray = field(repr=False)
    lat_edges: np.ndarray = field(repr=False)
    lon_centers: np.ndarray = field(repr=False)
    cell_area: np.ndarray = field(repr=False)
    corner_area: np.ndarray = field(repr=False)

    @property
    def dlat(self) -> float:
        return np.pi / self.nlat

    @property
    def dlon(self) -> float:
        return 2.0 * np.pi / self.nlon

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    @property
    def lon_u(self) -> np.ndarray:
        return self.lon_centers + 0.5 * self.dlon

    @property
    def lat_v(self) -> np.ndarray:
        return self.lat_edges[1:]

    @property
    def row_area(self) -> np.ndarray:
        """Area of one cell in each latitude row, shape ``(nlat,)``."""
        return self.cell_area[:, 0]

    @property
    def total_area(self) -> float:
        return float(self.cell_area.sum())

    def __eq__(self, other):
        if not isinstance(other, SphericalGrid):
            return NotImplemented
        return (self.nlat, self.nlon, self.radius) == (other.nlat, other.nlon, other.radius)

    def __hash__(self):
        return hash((self.nlat, self.nlon, self.radius))

    def points(self, location: str = "center") -> tuple[np.ndarray, np.ndarray]:
        """2-D ``(lat, lon)`` arrays for ``center``, ``u`` or ``v`` points."""
        if location == "center":
            lat, lon = self.lat_centers, self.lon_centers
        elif location == "u":
            lat, lon = self.lat_centers, self.lon_u
        elif location == "v":
            lat, lon = self.lat_v, self.lon_centers
        else:
            raise ValueError(f"unknown location {location!r}")
        return np.meshgrid(lat, lon, indexing="ij")

    def check_field(self, field, name="field"):
        field = np.asarray(field)
        if field.shape != self.shape:
            raise ShapeError(f"{name} has shape {field.shape}, grid expects {self.shape}")
        return field


def build_grid(nlat: int, nlon: int, radius: float = EARTH_RADIUS) -> SphericalGrid:
    if int(nlat) != nlat or int(nlon) != nlon:
        raise ConfigurationError("grid sizes must be integers")
    nlat, nlon = int(nlat), int(nlon)
    if nlat < 4 or nlon < 8:
        raise ConfigurationError(f"degenerate grid {nlat}x{nlon}: need nlat >= 4 and nlon >= 8")
    if nlon % 2:
        raise ConfigurationError(f"nlon must be even, got {nlon}")
    if not radius > 0:
        raise ConfigurationError("radius must be positive")

    dlat = np.pi / nlat
    dlon = 2.0 * np.pi / nlon
    lat_edges = -0.5 * np.pi + dlat * np.arange(nlat + 1)
    lat_edges[-1] = 0.5 * np.pi
    lat_centers = -0.5 * np.pi + dlat * (np.arange(nlat) + 0.5)
    lon_centers = -np.pi + dlon * np.arange(nlon)

    sin_e = np.sin(lat_edges)
    row_area = radius**2 * dlon * (sin_e[1:] - sin_e[:-1])
    cell_area = np.repeat(row_area[:, None], nlon, axis=1)

    # dual cells: interior corners span two centre latitudes, poles are caps
    sin_c = np.sin(lat_centers)
    corner_rows = np.empty(nlat + 1)
    corner_rows[1:-1] = radius**2 * dlon * (sin_c[1:] - sin_c[:-1])
    corner_rows[0] = 2.0 * np.pi * radius**2 * (1.0 + sin_c[0]) / nlon
    corner_rows[-1] = 2.0 * np.pi * radius**2 * (1.0 - sin_c[-1]) / nlon
    corner_area = np.repeat(corner_rows[:, None], nlon, axis=1)

    for arr in (lat_edges, lat_centers, lon_centers, cell_area, corner_area):
        arr.setflags(write=False)
    return SphericalGrid(nlat, nlon, float(radius), lat_centers, lat_edges, lon_centers,
                         cell_area, corner_area)


def weighted_mean(values, areas) -> float:
    values = np.asarray(values, dtype=float)
    areas = np.asarray(areas, dtype=float)
    if values.shape != areas.shape:
        raise ShapeError(f"values {values.shape} and areas {areas.shape} differ")
    return float(np.sum(areas * values) / np.sum(areas))


def area_mean(field, grid: SphericalGrid) -> float:
    """Area-weighted mean ``sum(A f) / sum(A)``."""
    return weighted_mean(grid.check_field(field), grid.cell_area)
