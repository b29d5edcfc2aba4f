import math

import numpy as np
import pytest

from georec import geo

# Table-driven reference: integer interleaving for encode and the classic
# neighbor/border lookup tables for adjacency. Shares no code with georec.geo.
_ALPHA = "0123456789bcdefghjkmnpqrstuvwxyz"
_NB = {
    "n": ("p0r21436x8zb9dcf5h7kjnmqesgutwvy", "bc01fg45238967deuvhjyznpkmstqrwx"),
    "s": ("14365h7k9dcfesgujnmqp0r2twvyx8zb", "238967debc01fg45kmstqrwxuvhjyznp"),
    "e": ("bc01fg45238967deuvhjyznpkmstqrwx", "p0r21436x8zb9dcf5h7kjnmqesgutwvy"),
    "w": ("238967debc01fg45kmstqrwxuvhjyznp", "14365h7k9dcfesgujnmqp0r2twvyx8zb"),
}
_BORDER = {
    "n": ("prxz", "bcfguvyz"),
    "s": ("028b", "0145hjnp"),
    "e": ("bcfguvyz", "prxz"),
    "w": ("0145hjnp", "028b"),
}


def ref_encode(lat, lon, precision):
    nbits = 5 * precision
    lon_bits = (nbits + 1) // 2
    lat_bits = nbits // 2
    li = min(int((lon + 180.0) / 360.0 * (1 << lon_bits)), (1 << lon_bits) - 1)
    ai = min(int((lat + 90.0) / 180.0 * (1 << lat_bits)), (1 << lat_bits) - 1)
    bits = []
    for k in range(nbits):
        if k % 2 == 0:
            lon_bits -= 1
            bits.append((li >> lon_bits) & 1)
        else:
            lat_bits -= 1
            bits.append((ai >> lat_bits) & 1)
    return "".join(_ALPHA[int("".join(map(str, bits[i:i + 5])), 2)] for i in range(0, nbits, 5))


def ref_adjacent(h, d):
    last, parent = h[-1], h[:-1]
    t = len(h) % 2
    if last in _BORDER[d][t] and parent:
        parent = ref_adjacent(parent, d)
    return parent + _ALPHA[_NB[d][t].index(last)]


def ref_neighbors(h):
    n, s = ref_adjacent(h, "n"), ref_adjacent(h, "s")
    return [n, ref_adjacent(n, "e"), ref_adjacent(h, "e"), ref_adjacent(s, "e"),
            s, ref_adjacent(s, "w"), ref_adjacent(h, "w"), ref_adjacent(n, "w")]


def random_coords(rng, n, lat_lim=89.0):
    return zip(rng.uniform(-lat_lim, lat_lim, n), rng.uniform(-180, 180, n))


def test_encode_anchors():
    assert geo.encode(0.0, 0.0, 1) == "s" == ref_encode(0.0, 0.0, 1)
    assert geo.encode(57.64911, 10.40744, 11) == "u4pruydqqvj"
    assert ref_encode(57.64911, 10.40744, 11) == "u4pruydqqvj"


def test_encode_matches_reference():
    rng = np.random.default_rng(0)
    for lat, lon in random_coords(rng, 1000, 90.0):
        p = int(rng.integers(1, 13))
        assert geo.encode(lat, lon, p) == ref_encode(lat, lon, p)


def test_encode_errors():
    with pytest.raises(geo.GeoError):
        geo.encode(91.0, 0.0, 6)
    with pytest.raises(geo.GeoError):
        geo.encode(0.0, 0.0, 13)
    with pytest.raises(geo.GeoError):
        geo.encode(float("nan"), 0.0, 6)


def test_decode_center_anchors():
    assert geo.decode_center("s") == (22.5, 22.5)
    c = geo.decode_center(geo.encode(0.0, 0.0, 12))
    h, w = geo.cell_size(12)
    assert abs(c.lat) <= h and abs(c.lon) <= w
    with pytest.raises(geo.GeoError):
        geo.decode_center("abc")  # 'a' is not in the alphabet


def test_round_trip_and_prefix_monotonicity():
    rng = np.random.default_rng(1)
    for lat, lon in random_coords(rng, 1000, 90.0):
        code = geo.encode(lat, lon, 8)
        lat_lo, lat_hi, lon_lo, lon_hi = geo.bounds(code)
        assert lat_lo <= lat <= lat_hi and lon_lo <= lon <= lon_hi
        c = geo.decode_center(code)
        assert geo.encode(c.lat, c.lon, 8) == code
        for p in range(2, 9):
            assert geo.encode(lat, lon, p).startswith(geo.encode(lat, lon, p - 1))


def test_neighbors_match_reference_and_are_distinct():
    rng = np.random.default_rng(2)
    for i, (lat, lon) in enumerate(random_coords(rng, 1000, 85.0)):
        cell = geo.encode(lat, lon, int(rng.integers(3, 9)))
        nb = geo.neighbors8(cell)
        assert not nb.any_degenerate
        assert len(set(nb.cells)) == 8 and cell not in nb.cells
        if i < 100:
            assert list(nb.cells) == ref_neighbors(cell)


def test_neighbor_symmetry():
    rng = np.random.default_rng(3)
    opposite = {0: 4, 1: 5, 2: 6, 3: 7, 4: 0, 5: 1, 6: 2, 7: 3}
    for lat, lon in random_coords(rng, 1000):
        cell = geo.encode(lat, lon, 6)
        nb = geo.neighbors8(cell)
        for k, other in enumerate(nb.cells):
            assert geo.neighbors8(other).cells[opposite[k]] == cell


def test_north_south_offsets_are_one_cell_height():
    rng = np.random.default_rng(4)
    h, w = geo.cell_size(7)
    for lat, lon in random_coords(rng, 200):
        cell = geo.encode(lat, lon, 7)
        c = geo.decode_center(cell)
        nb = geo.neighbors8(cell)
        n, s = geo.decode_center(nb.cells[0]), geo.decode_center(nb.cells[4])
        assert math.isclose(n.lat - c.lat, h, rel_tol=1e-9) and n.lon == c.lon
        assert math.isclose(c.lat - s.lat, h, rel_tol=1e-9) and s.lon == c.lon


def test_pole_and_antimeridian():
    top = geo.encode(89.99, 10.0, 4)
    nb = geo.neighbors8(top)
    assert nb.degenerate == (True, True, False, False, False, False, False, True)
    east_edge = geo.encode(0.1, 179.99, 5)
    e = geo.neighbors8(east_edge).cells[2]
    assert geo.decode_center(e).lon < -179.0


def test_distance_anchors_and_properties():
    assert geo.distance_km((10.0, 20.0), (10.0, 20.0)) == 0.0
    assert abs(geo.distance_km((0.0, 0.0), (0.0, 1.0)) - 6371.0 * math.pi / 180) < 1e-9
    assert abs(geo.distance_km((0.0, 0.0), (0.0, 1.0)) - 111.1949) < 1e-3
    rng = np.random.default_rng(5)
    pts = list(random_coords(rng, 3000, 90.0))
    for a, b, c in zip(pts[0::3], pts[1::3], pts[2::3]):
        ab, ba = geo.distance_km(a, b), geo.distance_km(b, a)
        assert ab == ba
        assert geo.distance_km(a, c) <= ab + geo.distance_km(b, c) + 1e-9


def test_cell_distance():
    assert geo.cell_distance_km("u4pruy", "u4pruy") == 0.0
    assert geo.cell_distance_km("u4pruy", "u4pruz") > 0.0
