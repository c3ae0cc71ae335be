import numpy as np
import pytest

from oracles import simulate_rounds
from pointiso.detecting import DetectionTables, IsotopeTrace
from pointiso.grouping import (FRAME_COLS, FRAME_ROWS, GROUP_SIZE, ClusterConfig, GroupingConfig, IsoGroupingNet,
                               IsotopeCluster, blank_frame, chain_isotopes, classify_group, cluster_isotopes,
                               degrade_resolution, group_label, make_isotope, ppm_window, scan_cluster)
from pointiso.lcms import LcmsMap, scale_intensities

A_MZ, B_MZ = 500.2351, 500.2443


def ladder_map(mzs, scans=range(5, 20), n_scans=30, height=1000.0):
    """Bell-ish traces at each m/z over ``scans``."""
    scans = list(scans)
    mid = (scans[0] + scans[-1]) / 2
    peaks = [[] for _ in range(n_scans)]
    for s in scans:
        for k, mz in enumerate(mzs):
            peaks[s].append((mz, height * 0.8 ** k * np.exp(-0.5 * ((s - mid) / 3) ** 2)))
    return LcmsMap.from_scans([(10 + 0.05 * i, p) for i, p in enumerate(peaks)])


def ladder_isotopes(n, spacing=0.5, mono=500.0, **kw):
    mzs = [round(mono + spacing * k, 4) for k in range(n)]
    m = ladder_map(mzs, **kw)
    return m, [make_isotope(m, mz, 5, 19) for mz in mzs]


# -- resolution degradation -----------------------------------------------------------


def test_worked_example_bucket_and_window():
    assert ppm_window(A_MZ) == (500.2341, 500.2361)
    m = LcmsMap.from_scans([(10.0, [(A_MZ, 50.0), (B_MZ, 70.0)])])
    mz2, _, vals = degrade_resolution(m, A_MZ, 0, 0)
    assert mz2 == 500.24 and vals.tolist() == [50.0]
    mz2b, _, valsb = degrade_resolution(m, B_MZ, 0, 0)
    assert mz2b == 500.24 and valsb.tolist() == [70.0]


def test_colliding_isotopes_stay_in_own_sequences():
    peaks = []
    for s in range(10):
        h = 100.0 + 10 * s
        peaks.append([(A_MZ, h), (B_MZ, 2 * h), (A_MZ + 0.5, 0.7 * h), (B_MZ + 0.5, 1.4 * h)])
    m = scale_intensities(LcmsMap.from_scans([(10 + 0.05 * i, p) for i, p in enumerate(peaks)]))
    tables = DetectionTables()
    for mz in (A_MZ, B_MZ, A_MZ + 0.5, B_MZ + 0.5):
        ids = m.select(0, 10, mz - 1e-6, mz + 1e-6)
        tables.add(IsotopeTrace(2, round(mz, 4), np.arange(10), m.intensity[ids], ids))
    clusters = cluster_isotopes(tables, m)
    assert sorted([round(i.mz, 4) for i in c.isotopes] for c in clusters) == \
           [[A_MZ, round(A_MZ + 0.5, 4)], [B_MZ, round(B_MZ + 0.5, 4)]]
    for c in clusters:
        for iso in c.isotopes:
            want = m.intensity[m.select(0, 10, iso.mz - 1e-6, iso.mz + 1e-6)]
            assert np.array_equal(iso.intensities, want)
            assert iso.mz_2dec in (500.24, 500.74)


def test_single_point_signal():
    m = LcmsMap.from_scans([(10.0 + 0.05 * s, [(600.0, 42.0)]) for s in range(4)])
    _, scans, vals = degrade_resolution(m, 600.0, 1, 2)
    assert scans.tolist() == [1, 2] and vals.tolist() == [42.0, 42.0]


# -- frames ---------------------------------------------------------------------------


def test_frame_full_15_scans():
    m = LcmsMap.from_scans([(10 + 0.05 * s, [(500.0, 10.0 + min(s, 14 - s))]) for s in range(15)])
    iso = make_isotope(m, 500.0, 0, 14)
    assert iso.frame.grid.shape == (FRAME_ROWS, FRAME_COLS)
    assert np.all(iso.frame.grid[:, 0] > 0)
    assert not iso.frame.grid[:, 1:].any()


def test_frame_three_scan_signal():
    m = LcmsMap.from_scans([(10 + 0.05 * s, [(500.0, [0, 5, 9, 5, 0][s] or 1e-300)]) for s in range(5)])
    iso = make_isotope(m, 500.0, 1, 3)
    nz = np.flatnonzero(iso.frame.grid[:, 0])
    assert nz.tolist() == [6, 7, 8]


def test_frame_peak_at_map_edge_padded():
    m = LcmsMap.from_scans([(10 + 0.05 * s, [(500.0, 10.0 - s)]) for s in range(4)])
    iso = make_isotope(m, 500.0, 0, 3)
    assert iso.peak_scan == 0
    assert np.flatnonzero(iso.frame.grid[:, 0]).tolist() == [7, 8, 9, 10]


def test_frame_auc_rectangle():
    h, w = 20.0, 6
    m = LcmsMap.from_scans([(10 + 0.05 * s, [(500.0, h)]) for s in range(w)])
    assert make_isotope(m, 500.0, 0, w - 1).auc == h * w
    s = scale_intensities(m)
    assert make_isotope(s, 500.0, 0, w - 1).auc == pytest.approx(h * w, rel=1e-12)


# -- clustering -----------------------------------------------------------------------


def test_chain_charge2_ladder():
    _, isos = ladder_isotopes(3)
    clusters = chain_isotopes(isos, 2)
    assert len(clusters) == 1 and len(clusters[0].isotopes) == 3


def test_chain_disjoint_rt_separates():
    mzs = [500.0, 500.5, 501.0]
    peaks = [[] for _ in range(30)]
    for k, mz in enumerate(mzs):
        for s in range(10 * k, 10 * k + 5):
            peaks[s].append((mz, 100.0))
    m = LcmsMap.from_scans([(10 + 0.05 * i, p) for i, p in enumerate(peaks)])
    isos = [make_isotope(m, mz, 10 * k, 10 * k + 4) for k, mz in enumerate(mzs)]
    assert [len(c.isotopes) for c in chain_isotopes(isos, 2)] == [1, 1, 1]


def test_chain_spacing_tolerance():
    _, isos = ladder_isotopes(2, spacing=0.55)
    assert len(chain_isotopes(isos, 2)) == 2
    _, isos = ladder_isotopes(2, spacing=0.509)
    assert len(chain_isotopes(isos, 2)) == 1


def test_chain_each_isotope_once():
    _, isos = ladder_isotopes(6, spacing=0.25)
    clusters = chain_isotopes(isos, 4, ClusterConfig())
    ids = [id(i) for c in clusters for i in c.isotopes]
    assert len(ids) == len(set(ids)) == 6


def test_group_labels():
    assert [group_label(k) for k in range(1, 8)] == [0, 1, 2, 3, 4, 4, 4]


# -- classifier -----------------------------------------------------------------------


def test_untrained_probabilities():
    net = IsoGroupingNet(GroupingConfig(seed=1))
    _, isos = ladder_isotopes(3)
    frames = [i.frame for i in isos] + [blank_frame(), blank_frame()]
    cls, probs = classify_group(net, frames, 2)
    assert probs.shape == (5,) and abs(probs.sum() - 1) < 1e-12
    assert 0 <= cls <= 4
    again = classify_group(net, frames, 2)
    assert again[0] == cls and np.array_equal(again[1], probs)


def test_classify_needs_five_frames():
    with pytest.raises(ValueError):
        classify_group(IsoGroupingNet(), [blank_frame()] * 4, 2)


def test_frame_encoder_shared_across_slots():
    net = IsoGroupingNet(GroupingConfig(seed=2))
    rng = np.random.default_rng(0)
    grids = rng.uniform(0, 255, size=(1, GROUP_SIZE, FRAME_ROWS, FRAME_COLS))
    aucs = rng.uniform(1e3, 1e6, size=(1, GROUP_SIZE))
    # identical frames in every slot must give identical per-slot encodings
    same = np.repeat(grids[:, :1], GROUP_SIZE, axis=1)
    enc = net.encode_frames(same, np.repeat(aucs[:, :1], GROUP_SIZE, axis=1)).data
    assert np.allclose(enc[0], enc[0, :1])


def test_trained_blank_frames_class0(trained):
    _, grp = trained
    assert classify_group(grp, [blank_frame()] * GROUP_SIZE, 2)[0] == 0


# -- scan rounds ----------------------------------------------------------------------


def scripted(classes):
    it = iter(classes)
    calls = []

    def classify(frames, charge):
        assert len(frames) == GROUP_SIZE
        calls.append(frames)
        return next(it)

    return classify, calls


def test_two_isotopes_class1():
    m, isos = ladder_isotopes(2)
    feats = scan_cluster(IsotopeCluster(2, isos), scripted([1])[0], m)
    assert len(feats) == 1 and feats[0].num_isotopes == 2


def test_seven_isotopes_four_then_two():
    m, isos = ladder_isotopes(7)
    classify, calls = scripted([4, 2])
    feats = scan_cluster(IsotopeCluster(2, isos), classify, m)
    assert simulate_rounds(7, [4, 2]) == [(0, 6)]
    assert len(feats) == 1 and feats[0].num_isotopes == 7
    # second round opens on the fifth isotope and pads the tail with blanks
    assert calls[1][0] is isos[4].frame
    assert [f.valid for f in calls[1]] == [True, True, True, False, False]


def test_decoy_cluster_all_zero():
    m, isos = ladder_isotopes(4)
    assert scan_cluster(IsotopeCluster(2, isos), lambda f, z: 0, m) == []


def test_feature_fields():
    m, isos = ladder_isotopes(3)
    (f,) = scan_cluster(IsotopeCluster(2, isos), scripted([2])[0], m)
    assert f.mono_mz == isos[0].mz and f.charge == 2
    assert f.intensity_auc == sum(i.auc for i in isos)
    assert f.peak_rt == float(m.rts[isos[0].peak_scan])
    assert [x[0] for x in f.isotopes] == [i.mz for i in isos]
