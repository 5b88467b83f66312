import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_grid
from stormuq.errors import DataError, DegenerateBufferError, GeometryError, ParseError
from stormuq.grid import (
    ErrorField,
    IncidenceMap,
    build_buffer,
    domain_indices,
    error_field_from_json,
    error_field_to_json,
    format_raster,
    load_buffer_spec,
    load_error_field,
    load_raster,
    make_error_field,
    pairwise_distances,
    save_error_field,
    save_raster,
    sqrt_transform,
)

ASC = """ncols 3
nrows 2
xllcorner 10
yllcorner 20
cellsize 0.5
NODATA_value -9999
1 2 3
4 -9999 6.25
"""


def test_load_raster_header_and_orientation(tmp_path):
    p = tmp_path / "a.asc"
    p.write_text(ASC)
    r = load_raster(p)
    assert (r.ncols, r.nrows, r.x0, r.y0, r.dx) == (3, 2, 10.0, 20.0, 0.5)
    assert r.as_2d()[1, 2] == 6.25
    assert r.mask.tolist() == [True, True, True, True, False, True]
    # first data row is the northern one
    xy = r.cell_centers([0, 3])
    assert np.allclose(xy, [[10.25, 20.75], [10.25, 20.25]])


def test_round_trip_is_byte_identical(tmp_path):
    p = tmp_path / "a.asc"
    p.write_text(ASC)
    q = tmp_path / "b.asc"
    save_raster(load_raster(p), q)
    assert q.read_text() == ASC


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=6, max_size=6))
def test_round_trip_values(tmp_path_factory, vals):
    d = tmp_path_factory.mktemp("rt")
    r = tiny_grid(3, 2, vals, cell=0.25)
    save_raster(r, d / "x.asc")
    back = load_raster(d / "x.asc")
    assert np.array_equal(back.values, r.values)
    assert format_raster(back) == format_raster(r)


@pytest.mark.parametrize("text, lineno", [
    (ASC.replace("nrows 2", "nrows two"), 1),
    (ASC.replace("cellsize 0.5", "cellsize"), 5),
    (ASC.replace("4 -9999 6.25", "4 x 6.25"), 8),
    (ASC.replace("4 -9999 6.25", "4 6.25"), 8),
    (ASC.replace("yllcorner 20", "ycorner 20"), 4),
])
def test_parse_errors_name_the_line(tmp_path, text, lineno):
    p = tmp_path / "bad.asc"
    p.write_text(text)
    with pytest.raises(ParseError) as ei:
        load_raster(p)
    assert ei.value.lineno == lineno
    assert f":{lineno}:" in str(ei.value)


def test_too_few_rows(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("\n".join(ASC.splitlines()[:-1]) + "\n")
    with pytest.raises(ParseError):
        load_raster(p)


def test_sqrt_transform_keeps_nodata_and_rejects_negatives():
    r = tiny_grid(2, 2, [4.0, -9999.0, 0.0, 9.0])
    s = sqrt_transform(r)
    assert s.values.tolist() == [2.0, -9999.0, 0.0, 3.0]
    with pytest.raises(DataError, match="cell index 2"):
        sqrt_transform(tiny_grid(2, 2, [4.0, 1.0, -1.0, 9.0]))


def test_build_buffer_matches_brute_force():
    grid = tiny_grid(10, 8, np.zeros(80), cell=1.0)
    land_vals = np.ones(80)
    land_vals[::7] = 0
    land = grid.with_values(land_vals)
    b = build_buffer(grid, land, (2.0, 2.0), (6.0, 5.0), 2.5)
    expect = []
    for k in range(80):
        x, y = grid.cell_centers([k])[0]
        near = min(np.hypot(x - 2, y - 2), np.hypot(x - 6, y - 5)) <= 2.5
        if near and land_vals[k] == 1:
            expect.append(k)
    assert b.member_indices.tolist() == expect


def test_build_buffer_degenerate_and_geometry():
    grid = tiny_grid(4, 4, np.zeros(16))
    sea = grid.with_values(np.zeros(16))
    with pytest.raises(DegenerateBufferError):
        build_buffer(grid, sea, (1, 1), (2, 2), 1.0)
    with pytest.raises(GeometryError):
        build_buffer(grid, tiny_grid(3, 3, np.ones(9)), (1, 1), (2, 2), 1.0)
    with pytest.raises(DataError):
        build_buffer(grid, grid.with_values(np.ones(16)), (1, 1), (2, 2), 0.0)


def test_error_field_is_obs_minus_forecast():
    grid = tiny_grid(4, 3, np.zeros(12))
    land = grid.with_values(np.ones(12))
    b = build_buffer(grid, land, (1.5, 1.5), (1.5, 1.5), 1.2)
    obs = grid.with_values(np.arange(12.0))
    fc = grid.with_values(np.full(12, 0.5))
    ef = make_error_field(obs, fc, b, "Florida", "x")
    assert np.array_equal(ef.y, np.arange(12.0)[b.member_indices] - 0.5)
    assert ef.locations.shape == (b.n, 2)


def test_error_field_reports_nodata_cells():
    grid = tiny_grid(4, 3, np.zeros(12))
    b = build_buffer(grid, grid.with_values(np.ones(12)), (1.5, 1.5), (1.5, 1.5), 1.2)
    vals = np.ones(12)
    vals[b.member_indices[1]] = -9999.0
    with pytest.raises(DataError, match=str(b.member_indices[1])):
        make_error_field(grid.with_values(vals), grid.with_values(np.ones(12)), b, "Gulf")
    with pytest.raises(GeometryError):
        make_error_field(grid.with_values(np.ones(12)), tiny_grid(3, 4, np.ones(12)), b, "Gulf")


def test_error_field_region_label():
    grid = tiny_grid(4, 3, np.zeros(12))
    b = build_buffer(grid, grid.with_values(np.ones(12)), (1.5, 1.5), (1.5, 1.5), 1.2)
    with pytest.raises(DataError):
        make_error_field(grid, grid, b, "Pacific")


def test_pairwise_distances():
    d = pairwise_distances([[0, 0], [3, 4], [6, 8]])
    assert np.array_equal(d, [[0, 5, 10], [5, 0, 5], [10, 5, 0]])
    with pytest.raises(DataError):
        pairwise_distances([[0, 0], [0, 0]])


def test_incidence_map_matches_dense_matrix(rng):
    dom = np.array([2, 5, 7, 11, 13])
    members = np.array([5, 11, 13])
    A = IncidenceMap.from_indices(dom, members)
    mu = rng.normal(size=5)
    assert np.array_equal(A.select(mu), A.matrix() @ mu)
    with pytest.raises(DataError):
        IncidenceMap.from_indices(dom, np.array([3]))


def test_domain_is_union_of_buffers():
    from stormuq.grid import BufferRegion
    a = BufferRegion((0, 0), (0, 0), 1, [1, 4, 6])
    b = BufferRegion((0, 0), (0, 0), 1, [2, 4, 9])
    assert domain_indices([a, b]).tolist() == [1, 2, 4, 6, 9]


def test_error_field_json_round_trip(tmp_path):
    grid = tiny_grid(4, 3, np.zeros(12))
    b = build_buffer(grid, grid.with_values(np.ones(12)), (1.5, 1.5), (1.5, 1.5), 1.2)
    ef = make_error_field(grid.with_values(np.arange(12.0) / 7), grid, b, "Atlantic", "al01")
    save_error_field(ef, tmp_path / "e.json")
    back = load_error_field(tmp_path / "e.json")
    assert isinstance(back, ErrorField)
    assert np.array_equal(back.y, ef.y)
    assert np.array_equal(back.buffer.member_indices, b.member_indices)
    assert back.storm_id == "al01" and back.region_label == "Atlantic"
    assert error_field_to_json(error_field_from_json(error_field_to_json(ef))) == error_field_to_json(ef)


def test_buffer_spec(tmp_path):
    p = tmp_path / "b.json"
    p.write_text(json.dumps({"center1": [1, 2], "center2": [3, 4], "radius_km": 2, "region": "Gulf"}))
    assert load_buffer_spec(p)["region"] == "Gulf"
    p.write_text(json.dumps({"center1": [1, 2], "center2": [3, 4], "radius_km": 2}))
    with pytest.raises(DataError):
        load_buffer_spec(p)
