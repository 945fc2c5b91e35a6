"""Laser scans, polar geometry, grid mapping and the ray-cast simulator."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfusion import depth
from mmfusion.depth import Circle, Pose, Rect
from mmfusion.errors import CalibrationError, ScanError

QUANTUM_DEG = depth.STEP_DEG


def _wall(x):
    return Rect(x, -1e6, x + 100, 1e6)


# ---------------------------------------------------------------------------
# Polar samples
# ---------------------------------------------------------------------------

def test_polar_examples():
    assert depth.polar_to_cartesian(depth.make_sample(1000, 0)) == (1000.0, 0.0)
    x, y = depth.polar_to_cartesian(depth.make_sample(1000, math.pi / 2))
    assert abs(x) < 1e-12 and y == 1000.0
    x, y = depth.polar_to_cartesian(depth.make_sample(2000, math.pi / 3))
    # cos(pi/3) = 1/2, sin(pi/3) = sqrt(3)/2
    assert abs(x - 1000.0) < 1e-3 and abs(y - 1000.0 * math.sqrt(3)) < 1e-3
    assert abs(y - 1732.0508) < 1e-3


@settings(max_examples=200, deadline=None)
@given(st.floats(20, 5600), st.floats(-2 * math.pi / 3, 2 * math.pi / 3))
def test_polar_round_trip(rho, alpha):
    x, y = depth.polar_to_cartesian(depth.make_sample(rho, alpha))
    assert abs(math.hypot(x, y) - rho) <= 1e-9 * rho
    assert abs(math.atan2(y, x) - alpha) <= 1e-9 * max(abs(alpha), 1.0)


def test_invalid_sample_not_converted():
    with pytest.raises(ScanError):
        depth.polar_to_cartesian(depth.make_sample(5, 0.0))


@pytest.mark.parametrize("rho,valid", [(19.999, False), (20, True), (5600, True), (5600.001, False),
                                       (0, False), (float("nan"), False), (float("inf"), False)])
def test_range_bounds(rho, valid):
    s = depth.make_sample(rho, 0.0)
    assert s.valid is valid
    if math.isfinite(rho):
        assert s.rho == rho  # kept, never clamped


# ---------------------------------------------------------------------------
# Scan files
# ---------------------------------------------------------------------------

def test_parse_single_line(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("0.0,1000\n")
    scan = depth.parse_scan(p)
    assert len(scan) == 1
    assert scan.samples[0] == depth.PolarSample(1000.0, 0.0, True)


def test_parse_below_floor_is_invalid(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("angle_deg,range_mm\n0.0,5\n1.0,6000\n")
    scan = depth.parse_scan(p)
    assert scan.valid.tolist() == [False, False]
    assert scan.ranges.tolist() == [5.0, 6000.0]


def test_parse_arc_span_error(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("0,1000\n120,1000\n241,1000\n")
    with pytest.raises(ScanError):
        depth.parse_scan(p)


def test_parse_sorts_and_rejects_garbage(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("10,500\n-10,600\n")
    assert np.degrees(depth.parse_scan(p).angles).tolist() == pytest.approx([-10, 10])
    p.write_text("0,100\nfoo,bar\n")
    with pytest.raises(ScanError):
        depth.parse_scan(p)
    p.write_text("0,100\n0,200\n")
    with pytest.raises(ScanError):
        depth.parse_scan(p)


def test_scan_file_round_trip(tmp_path):
    scan = depth.simulate_scan([_wall(900)])
    p = tmp_path / "w.csv"
    depth.write_scan(p, scan)
    back = depth.parse_scan(p)
    assert len(back) == depth.N_BEAMS
    np.testing.assert_allclose(back.ranges, scan.ranges, atol=5e-4)
    np.testing.assert_array_equal(back.valid, scan.valid)


# ---------------------------------------------------------------------------
# Camera grid
# ---------------------------------------------------------------------------

def test_camera_cell_examples():
    for grid in ((1, 1), (3, 3), (4, 7)):
        assert depth.pixel_to_camera_cell(0, 0, (50, 60), grid) == (0, 0)
    assert depth.pixel_to_camera_cell(50, 50, (100, 100)) == (1, 1)
    assert depth.pixel_to_camera_cell(99, 99, (100, 100)) == (2, 2)
    assert depth.pixel_to_camera_cell(99.999, 0, (100, 100)) == (0, 2)
    with pytest.raises(ValueError):
        depth.pixel_to_camera_cell(100, 0, (100, 100))


@pytest.mark.parametrize("hw,grid", [((64, 64), (3, 3)), ((100, 37), (3, 4)), ((10, 10), (3, 3))])
def test_camera_cells_partition(hw, grid):
    h, w = hw
    counts = np.zeros(grid, dtype=int)
    for r in range(h):
        for q in range(w):
            counts[depth.pixel_to_camera_cell(q, r, hw, grid)] += 1
    assert counts.sum() == h * w
    row_pop = counts.sum(axis=1) // w
    col_pop = counts.sum(axis=0) // h
    assert row_pop.max() - row_pop.min() <= 1
    assert col_pop.max() - col_pop.min() <= 1


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def test_default_calibration_columns():
    cal = depth.default_calibration()
    assert len(cal.table) == 9
    for r in range(3):
        # left image column looks at positive (left) laser angles
        assert [cal.laser_band((r, c)) for c in range(3)] == [2, 1, 0]
    assert cal.band_limits(0) == (-120.0, -40.0)
    assert cal.band_limits(1) == (-40.0, 40.0)
    assert cal.band_limits(2) == (40.0, 120.0)


def test_calibration_text_round_trip():
    cal = depth.default_calibration()
    back = depth.parse_calibration(depth.format_calibration(cal))
    assert back.table == cal.table and back.camera_grid == cal.camera_grid
    assert back.laser_bands == cal.laser_bands and back.arc_deg == cal.arc_deg


def test_calibration_errors():
    with pytest.raises(CalibrationError):
        depth.parse_calibration("0 0 -> 5\n")
    with pytest.raises(CalibrationError):
        depth.parse_calibration("zoom 3\n")
    cal = depth.parse_calibration("# one cell\n0 0 -> 1\n")
    with pytest.raises(CalibrationError):
        cal.laser_band((1, 1))


# ---------------------------------------------------------------------------
# Distance mapping
# ---------------------------------------------------------------------------

def _scan(ranges_by_angle):
    a, r = zip(*ranges_by_angle)
    return depth.scan_from_arrays(a, r)


def test_constant_band_distance():
    a = depth.beam_angles_deg()
    scan = depth.scan_from_arrays(a, np.full(len(a), 1500.0))
    cal = depth.default_calibration()
    for q in (5, 32, 60):
        assert depth.map_to_distance(q, 32, (64, 64), cal, scan).distance_mm == 1500.0


def test_minimum_rule():
    scan = _scan([(-10, 2000), (0, 1200), (10, 1800), (60, 300)])
    res = depth.map_to_distance(32, 32, (64, 64), depth.default_calibration(), scan)
    assert res == depth.Ranging(1200.0, 1, (1, 1))


def test_no_return_is_distinct():
    scan = _scan([(0, 5), (60, 300)])
    res = depth.map_to_distance(32, 32, (64, 64), depth.default_calibration(), scan)
    assert res.distance_mm is None


def test_mapping_errors():
    cal = depth.parse_calibration("0 0 -> 0\n")
    scan = _scan([(0, 1000)])
    with pytest.raises(CalibrationError):
        depth.map_to_distance(32, 32, (64, 64), cal, scan)
    with pytest.raises(ScanError):
        depth.map_to_distance(0, 0, (64, 64), cal, depth.LaserScan(()))


def test_band_edges():
    scan = _scan([(-120, 700), (-40, 800), (40, 900), (120, 950)])
    cal = depth.default_calibration()
    assert depth.band_distance(scan, *cal.band_limits(0)) == 700
    assert depth.band_distance(scan, *cal.band_limits(1)) == 800
    assert depth.band_distance(scan, *cal.band_limits(2), last=True) == 900


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(20, 5600), min_size=5, max_size=5), st.integers(0, 4), st.floats(0, 1))
def test_monotone_in_scan(ranges, which, frac):
    angles = [-30, -10, 0, 10, 30]
    cal = depth.default_calibration()
    before = depth.map_to_distance(32, 32, (64, 64), cal, _scan(zip(angles, ranges))).distance_mm
    lowered = list(ranges)
    lowered[which] = 20 + (lowered[which] - 20) * frac
    after = depth.map_to_distance(32, 32, (64, 64), cal, _scan(zip(angles, lowered))).distance_mm
    assert after <= before
    assert before == min(ranges)


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------

def test_beam_layout():
    a = depth.beam_angles_deg()
    assert len(a) == 667 and a[0] == -120.0
    assert a[-1] - a[0] == pytest.approx(666 * 0.36) and a[-1] <= 120.0


def test_empty_scene_all_invalid():
    scan = depth.simulate_scan([])
    assert len(scan) == depth.N_BEAMS and not scan.valid.any()


def test_centred_circle_exact():
    scan = depth.simulate_scan([Circle(0, 0, 500)])
    assert np.all(scan.ranges == 500.0) and scan.valid.all()


def test_wall_closed_form():
    scan = depth.simulate_scan([_wall(1000)])
    a = np.radians(depth.beam_angles_deg())
    front = np.abs(a) < math.radians(75)  # 1000/cos(75 deg) is inside the sensor range
    np.testing.assert_allclose(scan.ranges[front], 1000.0 / np.cos(a[front]), rtol=1e-12)
    assert np.all(scan.ranges[np.abs(a) >= math.pi / 2] == 0.0)
    assert not scan.valid[np.abs(a) >= math.pi / 2].any()
    # 1000/cos(a) > 5600 beyond ~79.7 deg: returned range kept but invalid
    far = (np.abs(a) < math.pi / 2) & (1000.0 / np.cos(a) > 5600)
    assert far.any() and not scan.valid[far].any()


def test_pose_shifts_and_turns():
    s = depth.simulate_scan([_wall(1000)], Pose(x=100))
    assert depth.band_distance(s, -1, 1) == pytest.approx(900.0 / math.cos(math.radians(0.12)))
    turned = depth.simulate_scan([Rect(-100, 800, 100, 900)], Pose(heading=math.pi / 2))
    assert depth.band_distance(turned, -1, 1) == pytest.approx(800.0 / math.cos(math.radians(0.12)))


def test_wall_at_900_maps_to_900():
    scan = depth.simulate_scan([_wall(900)])
    res = depth.map_to_distance(32, 32, (64, 64), depth.default_calibration(), scan)
    # nearest beam to 0 deg sits 0.12 deg off axis
    assert abs(res.distance_mm - 900.0) <= 900.0 * (1 / math.cos(math.radians(QUANTUM_DEG)) - 1)
    assert int(round(res.distance_mm)) == 900


def test_obstacle_dicts():
    assert depth.obstacle_from_dict({"type": "circle", "cx": 1, "cy": 2, "r": 3}) == Circle(1, 2, 3)
    assert depth.obstacle_from_dict({"x1": 0, "y1": 0, "x2": 1, "y2": 1}) == Rect(0, 0, 1, 1)
    with pytest.raises(ValueError):
        depth.obstacle_from_dict({"type": "cone"})
    with pytest.raises(ValueError):
        Rect(0, 0, 0, 1)
    with pytest.raises(ValueError):
        Circle(0, 0, 0)
