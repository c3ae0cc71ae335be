import io

import numpy as np
import pytest

from pointiso.detecting import DetectingConfig, IsoDetectingNet
from pointiso.evaluation import match_features
from pointiso.features import write_feature_table
from pointiso.grouping import GroupingConfig, IsoGroupingNet
from pointiso.lcms import LcmsMap, WindowGeometry
from pointiso.pipeline import CheckpointMismatchError, PipelineConfig, load_network, run_pipeline, save_network
from pointiso.synth import FeatureSpec, MapBuilder, PlantedFeature, geometric_envelope, render_feature

TINY = DetectingConfig(local=(8, 8), global_=(8, 16), point=(16, 8), output=(8,), edge=(8, 8),
                       edge_octaves=2, seed=3)
CFG = PipelineConfig(geometry=WindowGeometry(max_points=256))


def _table(features) -> str:
    buf = io.StringIO()
    write_feature_table(features, buf)
    return buf.getvalue()


def single_feature_map(charge=2, mono=401.3, n_iso=4, peak_rt=10.9):
    rts = np.round(10.0 + 0.05 * np.arange(45), 6)
    b = MapBuilder(rts)
    spec = FeatureSpec(mono, charge, n_iso, peak_rt, 0.08, geometric_envelope(n_iso), 3e5)
    ranges = render_feature(spec, b)
    truth = PlantedFeature("feature", charge, [round(mono + k / charge, 4) for k in range(n_iso)], ranges,
                           peak_rt, 0.0, spec)
    return b.build(), truth


def test_empty_map():
    feats, meta = run_pipeline(LcmsMap.from_scans([]), IsoDetectingNet(TINY), IsoGroupingNet(), CFG)
    assert feats == []
    assert meta["points"] == meta["isotopes"] == meta["clusters"] == meta["features"] == 0


def test_geometry_mismatch_raises_before_scanning():
    m, _ = single_feature_map()
    with pytest.raises(CheckpointMismatchError):
        run_pipeline(m, IsoDetectingNet(TINY), IsoGroupingNet(),
                     PipelineConfig(geometry=WindowGeometry(mz_span=1.0)))


def test_untrained_counts_consistent_and_deterministic():
    m, _ = single_feature_map()
    det, grp = IsoDetectingNet(TINY), IsoGroupingNet()
    a, meta = run_pipeline(m, det, grp, CFG)
    b, _ = run_pipeline(m, det, grp, PipelineConfig(geometry=CFG.geometry, sections=3))
    assert _table(a) == _table(b)
    assert meta["features"] <= meta["clusters"] <= meta["isotopes"]


def test_trained_single_feature(trained):
    det, grp = trained
    m, truth = single_feature_map()
    feats, meta = run_pipeline(m, det, grp, CFG)
    assert len(feats) == 1
    assert match_features(feats, [truth]).matched == 1
    again, _ = run_pipeline(m, det, grp, CFG)
    assert _table(feats) == _table(again)


def test_network_round_trip():
    for net in (IsoDetectingNet(TINY), IsoGroupingNet(GroupingConfig(fc=(32, 16), seed=4))):
        buf = io.StringIO()
        save_network(net, buf, {"note": 1})
        back = load_network(io.StringIO(buf.getvalue()))
        assert type(back) is type(net) and back.config == net.config
        for k, p in net.params.items():
            assert np.array_equal(back.params[k].data, p.data)


def test_load_network_wrong_module():
    buf = io.StringIO()
    save_network(IsoGroupingNet(), buf)
    with pytest.raises(CheckpointMismatchError):
        load_network(io.StringIO(buf.getvalue()), "detecting")
