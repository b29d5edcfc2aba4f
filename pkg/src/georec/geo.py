"""Geohash cells and great-circle distances."""
from __future__ import annotations

import functools
import math
from typing import NamedTuple

import numpy as np

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_DECODE = {ch: i for i, ch in enumerate(BASE32)}
EARTH_RADIUS_KM = 6371.0
DEFAULT_PRECISION = 6

# N, NE, E, SE, S, SW, W, NW as (d_lat, d_lon) steps in cell units
DIRECTIONS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
_STEPS = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))


class GeoError(ValueError):
    pass


class Coordinate(NamedTuple):
    lat: float
    lon: float


class Neighbors(NamedTuple):
    cells: tuple[str, ...]
    degenerate: tuple[bool, ...]

    @property
    def any_degenerate(self) -> bool:
        return any(self.degenerate)


def check_coordinate(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise GeoError(f"non-finite coordinate ({lat}, {lon})")
    if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
        raise GeoError(f"coordinate out of range ({lat}, {lon})")


def check_cell(cell: str) -> None:
    if not cell:
        raise GeoError("empty geohash")
    for ch in cell:
        if ch not in _DECODE:
            raise GeoError(f"invalid geohash character {ch!r} in {cell!r}")


def encode(lat: float, lon: float, precision: int = DEFAULT_PRECISION) -> str:
    check_coordinate(lat, lon)
    if not 1 <= precision <= 12:
        raise GeoError(f"precision must be in [1, 12], got {precision}")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    out = []
    even = True
    ch = bit = 0
    while len(out) < precision:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if lon >= mid:
                ch = (ch << 1) | 1
                lon_lo = mid
            else:
                ch <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if lat >= mid:
                ch = (ch << 1) | 1
                lat_lo = mid
            else:
                ch <<= 1
                lat_hi = mid
        even = not even
        bit += 1
        if bit == 5:
            out.append(BASE32[ch])
            ch = bit = 0
    return "".join(out)


def _bit_counts(precision: int) -> tuple[int, int]:
    total = 5 * precision
    return total // 2, total - total // 2  # lat bits, lon bits


def _to_indices(cell: str) -> tuple[int, int]:
    check_cell(cell)
    lat_i = lon_i = 0
    even = True
    for ch in cell:
        v = _DECODE[ch]
        for shift in range(4, -1, -1):
            b = (v >> shift) & 1
            if even:
                lon_i = (lon_i << 1) | b
            else:
                lat_i = (lat_i << 1) | b
            even = not even
    return lat_i, lon_i


def _from_indices(lat_i: int, lon_i: int, precision: int) -> str:
    lat_bits, lon_bits = _bit_counts(precision)
    out = []
    ch = 0
    lat_pos, lon_pos = lat_bits - 1, lon_bits - 1
    for k in range(5 * precision):
        if k % 2 == 0:
            b = (lon_i >> lon_pos) & 1
            lon_pos -= 1
        else:
            b = (lat_i >> lat_pos) & 1
            lat_pos -= 1
        ch = (ch << 1) | b
        if k % 5 == 4:
            out.append(BASE32[ch])
            ch = 0
    return "".join(out)


def bounds(cell: str) -> tuple[float, float, float, float]:
    """``(lat_min, lat_max, lon_min, lon_max)`` of the cell."""
    lat_i, lon_i = _to_indices(cell)
    lat_bits, lon_bits = _bit_counts(len(cell))
    dlat = 180.0 / (1 << lat_bits)
    dlon = 360.0 / (1 << lon_bits)
    return (-90.0 + lat_i * dlat, -90.0 + (lat_i + 1) * dlat,
            -180.0 + lon_i * dlon, -180.0 + (lon_i + 1) * dlon)


def cell_size(precision: int) -> tuple[float, float]:
    """Cell height and width in degrees."""
    lat_bits, lon_bits = _bit_counts(precision)
    return 180.0 / (1 << lat_bits), 360.0 / (1 << lon_bits)


@functools.lru_cache(maxsize=1 << 16)
def decode_center(cell: str) -> Coordinate:
    lat_lo, lat_hi, lon_lo, lon_hi = bounds(cell)
    return Coordinate((lat_lo + lat_hi) / 2, (lon_lo + lon_hi) / 2)


@functools.lru_cache(maxsize=1 << 16)
def neighbors8(cell: str) -> Neighbors:
    """Adjacent cells in N, NE, E, SE, S, SW, W, NW order.

    Longitude wraps across the antimeridian. A step past the north or south
    edge is clamped to the edge row and flagged as degenerate.
    """
    lat_i, lon_i = _to_indices(cell)
    p = len(cell)
    lat_bits, lon_bits = _bit_counts(p)
    n_lat, n_lon = 1 << lat_bits, 1 << lon_bits
    cells, flags = [], []
    for d_lat, d_lon in _STEPS:
        la = lat_i + d_lat
        bad = not 0 <= la < n_lat
        la = min(max(la, 0), n_lat - 1)
        cells.append(_from_indices(la, (lon_i + d_lon) % n_lon, p))
        flags.append(bad)
    return Neighbors(tuple(cells), tuple(flags))


def distance_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Haversine distance on a sphere of radius 6371 km."""
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def cell_distance_km(a: str, b: str) -> float:
    """Distance between cell centers."""
    if a == b:
        return 0.0
    return distance_km(decode_center(a), decode_center(b))


def distances_km(lat, lon, lats, lons):
    """Vectorized haversine from one point (or matching arrays) to many."""
    lat1, lon1 = np.radians(lat), np.radians(lon)
    lat2, lon2 = np.radians(lats), np.radians(lons)
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))
