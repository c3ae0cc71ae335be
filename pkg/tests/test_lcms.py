import io

import numpy as np
import pytest

from pointiso.lcms import (LcmsMap, Ms1ParseError, NoSignalError, WindowGeometry, cut_window, parse_ms1,
                           scale_intensities, tile_origins, write_ms1)

FIXTURE = """H\tCreationDate\ttoday
S\t1\t1
I\tRTime\t10.00
400.6234 50
400.1234 100
S\t2\t2
I\tRTime\t10.02
400.1234 90
"""


def test_parse_empty_stream():
    m = parse_ms1(io.StringIO(""))
    assert m.num_scans == 0 and m.num_points == 0


def test_parse_two_scan_fixture():
    m = parse_ms1(io.StringIO(FIXTURE))
    assert m.num_scans == 2
    assert m.num_points == 3
    _, mz0, i0 = m.scan(0)
    assert mz0.tolist() == [400.1234, 400.6234]
    assert i0.tolist() == [100.0, 50.0]
    assert m.rts.tolist() == [10.00, 10.02]
    assert m.scan_numbers.tolist() == [1, 2]


def test_parse_error_names_line():
    text = "S\t1\t1\nI\tRTime\t10.0\n400.12 abc\n"
    with pytest.raises(Ms1ParseError) as e:
        parse_ms1(io.StringIO(text))
    assert e.value.lineno == 3
    assert "line 3" in str(e.value)


@pytest.mark.parametrize("text", ["S\n", "S\tx\t1\n", "400.0 1\n", "S\t1\t1\n400.0 1\n"])
def test_parse_malformed(text):
    with pytest.raises(Ms1ParseError):
        parse_ms1(io.StringIO(text))


def test_round_trip_fixture():
    m = parse_ms1(io.StringIO(FIXTURE))
    buf = io.StringIO()
    write_ms1(m, buf)
    back = parse_ms1(io.StringIO(buf.getvalue()))
    assert np.array_equal(back.mz, m.mz)
    assert np.array_equal(back.intensity, m.intensity)
    assert np.array_equal(back.rts, m.rts)


def test_scale_single_point():
    m = LcmsMap.from_scans([(1.0, [(400.0, 10.0)])])
    assert scale_intensities(m).intensity.tolist() == [255.0]


def test_scale_two_points_and_inverse():
    m = LcmsMap.from_scans([(1.0, [(400.0, 10.0), (401.0, 5.0)])])
    s = scale_intensities(m)
    assert s.intensity.tolist() == [255.0, 127.5]
    assert np.allclose(s.raw_intensity, [10.0, 5.0])


def test_scale_all_zero():
    m = LcmsMap.from_scans([(1.0, [(400.0, 0.0)])])
    with pytest.raises(NoSignalError, match="no signal"):
        scale_intensities(m)


def test_window_past_end_is_masked(fixture_map):
    w = cut_window(fixture_map, (0, 900.0), WindowGeometry(max_points=8))
    assert not w.target.mask.any()


def test_window_matches_brute_force(fixture_map):
    geom = WindowGeometry(mz_span=2.0, rt_scans=15, max_points=8)
    w = cut_window(fixture_map, (0, 400.0), geom)
    got = sorted(w.target.index[w.target.mask].tolist())
    want = [i for i in range(fixture_map.num_points) if 400.0 <= fixture_map.mz[i] < 402.0]
    assert got == want
    # surrounds are empty for this tiny map
    assert all(not r.mask.any() for r in w.surround_list())


def test_adjacent_windows_partition(fixture_map):
    geom = WindowGeometry(mz_span=0.5, rt_scans=1, max_points=8)
    a = cut_window(fixture_map, (0, 400.0), geom)
    b = cut_window(fixture_map, (0, 400.5), geom)
    ia = set(a.target.index[a.target.mask].tolist())
    ib = set(b.target.index[b.target.mask].tolist())
    assert ia == {0} and ib == {1}
    assert not ia & ib


def test_truncation_keeps_most_intense():
    peaks = [(400.0 + 0.01 * k, float(k + 1)) for k in range(10)]
    m = LcmsMap.from_scans([(1.0, peaks)])
    w = cut_window(m, (0, 400.0), WindowGeometry(max_points=4))
    kept = sorted(m.intensity[w.target.index[w.target.mask]].tolist())
    assert kept == [7.0, 8.0, 9.0, 10.0]
    assert w.target.points[~w.target.mask].sum() == 0


def test_surround_regions_adjacent():
    peaks = [(398.5, 1.0), (400.5, 2.0), (402.5, 3.0)]
    m = LcmsMap.from_scans([(float(t), peaks) for t in range(45)])
    geom = WindowGeometry(max_points=64)
    w = cut_window(m, (15, 400.0), geom)
    got = {k: set(m.mz[r.index[r.mask]].tolist()) for k, r in w.surrounds.items()}
    assert got["left"] == {398.5} and got["right"] == {402.5}
    assert got["below"] == {400.5} and got["above"] == {400.5}
    scans = {k: set(m.scan_index[r.index[r.mask]].tolist()) for k, r in w.surrounds.items()}
    assert scans["below"] == set(range(0, 15)) and scans["above"] == set(range(30, 45))


def test_tile_origins_empty_map():
    assert tile_origins(LcmsMap.from_scans([]), WindowGeometry()) == []
