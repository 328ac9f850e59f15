"""Transfers between grids, staggerings and the pixel patches seen by the network."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import ConfigurationError, CoverageError, ShapeError
from .grid import SphericalGrid
from .solver import SweState


# -- inverse-distance restriction ------------------------------------------------
def _xyz(lat, lon):
    lat = np.ravel(lat)
    lon = np.ravel(lon)
    c = np.cos(lat)
    return np.column_stack([c * np.cos(lon), c * np.sin(lon), np.sin(lat)])


def great_circle(lat1, lon1, lat2, lon2):
    """Central angle between points (radians), haversine form."""
    s = (np.sin(0.5 * (lat2 - lat1)) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin(0.5 * (lon2 - lon1)) ** 2)
    return 2.0 * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0)))


def inverse_distance_weights(distances, power: float = 1.0, atol: float = 1e-12) -> np.ndarray:
    """Normalised weights ``d^-p / sum(d^-p)`` along the last axis.

    A (near) zero distance takes the whole weight, so coincident points are
    copied rather than blended.
    """
    d = np.asarray(distances, dtype=float)
    exact = d <= atol
    with np.errstate(divide="ignore"):
        w = np.where(exact, 0.0, 1.0 / np.where(exact, 1.0, d) ** power)
    hit = exact.any(axis=-1, keepdims=True)
    w = np.where(hit, exact.astype(float), w)
    return w / w.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class IDWMap:
    """Sparse k-nearest inverse-distance interpolation operator."""

    index: np.ndarray
    weight: np.ndarray
    shape: tuple

    def __call__(self, values):
        flat = np.asarray(values, dtype=float).ravel()
        return np.sum(flat[self.index] * self.weight, axis=-1).reshape(self.shape)


def build_idw(src_lat, src_lon, dst_lat, dst_lon, k: int = 4, power: float = 1.0) -> IDWMap:
    src = _xyz(src_lat, src_lon)
    dst = _xyz(dst_lat, dst_lon)
    k = min(int(k), len(src))
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    chord, idx = cKDTree(src).query(dst, k=k)
    chord = np.reshape(chord, (len(dst), k))
    idx = np.reshape(idx, (len(dst), k))
    angle = 2.0 * np.arcsin(np.clip(0.5 * chord, 0.0, 1.0))
    return IDWMap(idx, inverse_distance_weights(angle, power), np.shape(dst_lat))


@lru_cache(maxsize=32)
def _restriction_maps(fine: SphericalGrid, coarse: SphericalGrid, k: int, power: float):
    maps = {}
    for loc in ("center", "u"):
        flat, flon = fine.points(loc)
        clat, clon = coarse.points(loc)
        maps[loc] = build_idw(flat, flon, clat, clon, k, power)
    # v: interior faces only, the pole faces are zero by construction
    flat, flon = fine.points("v")
    clat, clon = coarse.points("v")
    maps["v"] = build_idw(flat[:-1], flon[:-1], clat[:-1], clon[:-1], k, power)
    return maps


def restrict(fine_state: SweState, fine_grid: SphericalGrid, coarse_grid: SphericalGrid,
             k: int = 4, power: float = 1.0) -> SweState:
    """Inverse-distance-weighted restriction, evaluated at each staggered location."""
    if fine_grid.nlat <= coarse_grid.nlat or fine_grid.nlon <= coarse_grid.nlon:
        raise ConfigurationError(
            f"restriction needs a strictly finer source grid, got {fine_grid.shape} -> {coarse_grid.shape}")
    fine_grid.check_field(fine_state.h, "h")
    maps = _restriction_maps(fine_grid, coarse_grid, int(k), float(power))
    v = np.zeros(coarse_grid.shape)
    v[:-1] = maps["v"](fine_state.v[:-1])
    return SweState(maps["center"](fine_state.h), maps["u"](fine_state.u), v, fine_state.t)


def restrict_centered(field, fine_grid: SphericalGrid, coarse_grid: SphericalGrid,
                      k: int = 4, power: float = 1.0):
    """Restriction of a cell-centred scalar field."""
    if fine_grid.nlat <= coarse_grid.nlat or fine_grid.nlon <= coarse_grid.nlon:
        raise ConfigurationError("restriction needs a strictly finer source grid")
    return _restriction_maps(fine_grid, coarse_grid, int(k), float(power))["center"](field)


# -- staggering ------------------------------------------------------------------
def stagger_to_centers(state: SweState):
    """Two-point averages of face velocities to cell centres.

    The polar rows have a single interior ``v`` face, which is copied.
    """
    u, v = state.u, state.v
    uc = 0.5 * (u + np.roll(u, 1, axis=1))
    vc = np.empty_like(v)
    vc[1:-1] = 0.5 * (v[1:-1] + v[:-2])
    vc[0] = v[0]
    vc[-1] = v[-2]
    return uc, vc


def centers_to_stagger(uc, vc):
    """Inverse averaging from centres to faces; the north-pole face is zero."""
    uc = np.asarray(uc, dtype=float)
    vc = np.asarray(vc, dtype=float)
    if uc.shape != vc.shape:
        raise ShapeError("u and v must share a shape")
    u = 0.5 * (uc + np.roll(uc, -1, axis=1))
    v = np.zeros_like(vc)
    v[:-1] = 0.5 * (vc[:-1] + vc[1:])
    return u, v


# -- patches -----------------------------------------------------------------------
@dataclass(frozen=True)
class PatchSpec:
    grid_rows: int = 8
    grid_cols: int = 8
    overlap_fraction: float = 0.10
    pixel_size: int = 32

    def __post_init__(self):
        if not 0.0 <= self.overlap_fraction < 0.5:
            raise ConfigurationError("overlap_fraction must lie in [0, 0.5)")
        if self.pixel_size <= 0 or self.pixel_size % 16:
            raise ConfigurationError(f"pixel_size must be a positive multiple of 16, got {self.pixel_size}")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigurationError("patch grid must be at least 1x1")

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class PatchGeometry:
    """Rasterisation and back-sampling indices of one patch.

    ``pixel_cell`` holds the flat grid index feeding every pixel.
    ``cells`` lists the flat indices of all cells inside the patch box with
    their fractional pixel coordinates ``(row, col)`` in ``coords``; ``core``
    flags the cells owned by this patch (margin cells are ``False``).
    """

    patch_id: tuple
    pixel_cell: np.ndarray
    cells: np.ndarray
    coords: np.ndarray
    core: np.ndarray
    lat_bounds: tuple
    lon_bounds: tuple
    _sampler: tuple = field(default=None, repr=False)

    def sampler(self, size: int):
        """``(index, weight)`` arrays of the bilinear stencil, shape ``(ncells, 4)``."""
        if self._sampler is None:
            self._sampler = _bilinear_stencil(self.coords, size)
        return self._sampler


@dataclass
class PatchTensor:
    values: np.ndarray            # (2, S, S)
    source_coords: np.ndarray     # (ncells, 2) fractional pixel coordinates
    patch_id: tuple
    geometry: PatchGeometry = field(repr=False, default=None)

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != 2:
            raise ShapeError(f"patch values must have shape (2, S, S), got {self.values.shape}")


def _bilinear_stencil(coords, size):
    r = np.clip(coords[:, 0], 0.0, size - 1.0)
    c = np.clip(coords[:, 1], 0.0, size - 1.0)
    r0 = np.minimum(np.floor(r).astype(np.int64), size - 2)
    c0 = np.minimum(np.floor(c).astype(np.int64), size - 2)
    fr = r - r0
    fc = c - c0
    index = np.stack([r0 * size + c0, r0 * size + c0 + 1, (r0 + 1) * size + c0,
                      (r0 + 1) * size + c0 + 1], axis=1)
    weight = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return index, weight


def _bounds(count, parts):
    return [int(round(p * count / parts)) for p in range(parts + 1)]


@lru_cache(maxsize=16)
def patch_layout(grid: SphericalGrid, spec: PatchSpec) -> tuple:
    """Geometry of every patch, row-major over ``(n, m)``."""
    if grid.nlat < spec.grid_rows or grid.nlon < spec.grid_cols:
        raise ConfigurationError(
            f"grid {grid.shape} is smaller than the {spec.grid_rows}x{spec.grid_cols} patch grid")
    size = spec.pixel_size
    rb = _bounds(grid.nlat, spec.grid_rows)
    cb = _bounds(grid.nlon, spec.grid_cols)
    edges = grid.lat_edges
    lon_w = grid.lon_centers[0] - 0.5 * grid.dlon      # west edge of column 0
    layout = []
    for n in range(spec.grid_rows):
        core_lat = (edges[rb[n]], edges[rb[n + 1]])
        mlat = spec.overlap_fraction * (core_lat[1] - core_lat[0])
        lat_lo = max(core_lat[0] - mlat, -0.5 * np.pi)
        lat_hi = min(core_lat[1] + mlat, 0.5 * np.pi)
        rows = np.nonzero((grid.lat_centers > lat_lo) & (grid.lat_centers < lat_hi))[0]
        for m in range(spec.grid_cols):
            core_lon = (lon_w + cb[m] * grid.dlon, lon_w + cb[m + 1] * grid.dlon)
            mlon = spec.overlap_fraction * (core_lon[1] - core_lon[0])
            lon_lo, lon_hi = core_lon[0] - mlon, core_lon[1] + mlon
            # unwrapped longitudes of all columns relative to the box
            rel = np.mod(grid.lon_centers - lon_lo, 2.0 * np.pi)
            cols = np.nonzero(rel < lon_hi - lon_lo)[0]
            cols = cols[np.argsort(rel[cols])]
            clat = grid.lat_centers[rows]
            clon = lon_lo + rel[cols]

            # nearest cell centre for each pixel centre in (lat, lon) coordinates
            plat = lat_lo + (np.arange(size) + 0.5) * (lat_hi - lat_lo) / size
            plon = lon_lo + (np.arange(size) + 0.5) * (lon_hi - lon_lo) / size
            # candidates are all cells, so pixels near the box edge may read outside it
            mid = 0.5 * (lon_lo + lon_hi)
            all_lon = mid + np.mod(grid.lon_centers - mid + np.pi, 2.0 * np.pi) - np.pi
            ri = np.abs(plat[:, None] - grid.lat_centers[None, :]).argmin(axis=1)
            ci = np.abs(plon[:, None] - all_lon[None, :]).argmin(axis=1)
            pixel_cell = (ri[:, None] * grid.nlon + ci[None, :]).astype(np.int64)

            rr, cc = np.meshgrid(np.arange(len(rows)), np.arange(len(cols)), indexing="ij")
            cells = (rows[rr] * grid.nlon + cols[cc]).ravel()
            coords = np.column_stack([
                ((clat[rr] - lat_lo) / (lat_hi - lat_lo) * size - 0.5).ravel(),
                ((clon[cc] - lon_lo) / (lon_hi - lon_lo) * size - 0.5).ravel(),
            ])
            in_rows = (rows[rr] >= rb[n]) & (rows[rr] < rb[n + 1])
            in_cols = (cols[cc] >= cb[m]) & (cols[cc] < cb[m + 1])
            core = (in_rows & in_cols).ravel()
            layout.append(PatchGeometry((n, m), pixel_cell, cells, coords, core,
                                        (lat_lo, lat_hi), (lon_lo, lon_hi)))
    return tuple(layout)


def rasterize(uc, vc, geometry: PatchGeometry) -> np.ndarray:
    """Nearest-neighbour image ``(2, S, S)`` of a cell-centred vector field."""
    return np.stack([np.asarray(uc).ravel()[geometry.pixel_cell],
                     np.asarray(vc).ravel()[geometry.pixel_cell]])


def extract_patches(uc, vc, grid: SphericalGrid, spec: PatchSpec) -> list[PatchTensor]:
    uc = grid.check_field(uc, "u")
    vc = grid.check_field(vc, "v")
    return [PatchTensor(rasterize(uc, vc, geo), geo.coords, geo.patch_id, geo)
            for geo in patch_layout(grid, spec)]


def sample_patch(values, geometry: PatchGeometry) -> np.ndarray:
    """Bilinear samples ``(channels, ncells)`` of an image at the patch's cell coordinates."""
    values = np.asarray(values)
    size = values.shape[-1]
    index, weight = geometry.sampler(size)
    flat = values.reshape(values.shape[:-2] + (size * size,))
    return np.sum(flat[..., index] * weight, axis=-1)


def sample_back(patches, grid: SphericalGrid):
    """Stitch patch outputs into cell-centred ``(u, v)``; margins are discarded."""
    out = np.full((2, grid.nlat * grid.nlon), np.nan)
    covered = np.zeros(grid.nlat * grid.nlon, dtype=bool)
    for p in patches:
        geo = p.geometry
        if geo is None:
            raise CoverageError(f"patch {p.patch_id} carries no geometry")
        vals = sample_patch(p.values, geo)
        out[:, geo.cells[geo.core]] = vals[:, geo.core]
        covered[geo.cells[geo.core]] = True
    if not covered.all():
        missing = np.nonzero(~covered)[0]
        raise CoverageError(f"{missing.size} cells not covered by any patch (first: {missing[0]})")
    return out[0].reshape(grid.shape), out[1].reshape(grid.shape)
