from dataclasses import replace

import numpy as np
import pytest

from pointiso import tensor as T
from pointiso.detecting import DetectingConfig, IsoDetectingNet, class_weights
from pointiso.grouping import GroupingConfig, IsoGroupingNet
from pointiso.lcms import WindowGeometry, scale_intensities
from pointiso.optim import snapshot
from pointiso.synth import SynthConfig, generate_map, label_points
from pointiso.training import (DivergenceError, SampleConfig, TrainingConfig, detecting_origins, fine_tune,
                               make_detecting_samples, make_grouping_samples, train)

TINY = DetectingConfig(local=(8, 8), global_=(8, 16), point=(16, 8), output=(8,), edge=(8, 8),
                       edge_octaves=2, seed=3)
SMALL_MAP = SynthConfig(mz_range=(400.0, 412.0), num_scans=60, n_features=15, n_decoys=5, seed=21)
GEOM = WindowGeometry(max_points=64)


@pytest.fixture(scope="module")
def small_map():
    m, t = generate_map(SMALL_MAP)
    return scale_intensities(m), t


def split_example_weights():
    """The 100-point example: 60 class-0, 30 class-2, 10 class-3 points."""
    labels = np.array([0] * 60 + [2] * 30 + [3] * 10)
    w = class_weights(labels, np.ones(100, dtype=bool))
    return {c: set(w[labels == c].tolist()) for c in (0, 2, 3)}


def test_class_weight_worked_example():
    assert split_example_weights() == {0: {0.4}, 2: {0.7}, 3: {0.9}}


def test_class_weights_padding_and_single_class():
    labels = np.array([2, 2, 0, 0])
    mask = np.array([True, True, False, False])
    assert class_weights(labels, mask, 0.5).tolist() == [0.5, 0.5, 0.0, 0.0]
    assert not class_weights(labels, np.zeros(4, bool)).any()


def test_blank_windows_all_zero(small_map):
    m, t = small_map
    ws = make_detecting_samples(m, t, GEOM, SampleConfig(blank_windows=3))
    blanks = [w for w in ws if w.kind == "blank"]
    assert len(blanks) == 3
    assert all(not w.labels.any() and not w.target.mask.any() for w in blanks)


def test_weights_follow_rule_on_every_sample(small_map):
    m, t = small_map
    for w in make_detecting_samples(m, t, GEOM):
        live = w.labels[w.target.mask]
        if len(np.unique(live)) < 2:
            continue
        frac = np.bincount(live, minlength=10) / live.size
        assert np.array_equal(w.weights[w.target.mask], 1.0 - frac[live])
        assert not w.weights[~w.target.mask].any()


def test_straddling_placement_for_wide_features(small_map):
    m, t = small_map
    labels = label_points(m, t)
    ws = make_detecting_samples(m, t, GEOM, SampleConfig(offsets_per_feature=3, noise_windows=0, decoy_windows=0,
                                                         blank_windows=0))
    per_feature = 3
    wide = 0
    for k, f in enumerate(t.features):
        s0, s1 = m.scan_at_rt(f.rt_ranges[0][0]), m.scan_at_rt(f.rt_ranges[0][1])
        if s1 - s0 + 1 <= GEOM.rt_scans and f.isotope_mz[-1] - f.mono_mz < GEOM.mz_span - 0.02:
            continue
        wide += 1
        own = [i for i in np.flatnonzero(labels) if any(abs(m.mz[i] - mz) < 1e-4 for mz in f.isotope_mz)]
        own = set(own)
        cuts = []
        for w in ws[k * per_feature:(k + 1) * per_feature]:
            got = own & set(w.target.index[w.target.mask].tolist())
            cuts.append(0 < len(got) < len(own))
        assert any(cuts)
    assert wide > 0


def test_origins_deterministic(small_map):
    m, t = small_map
    assert detecting_origins(m, t, GEOM, SampleConfig(seed=4)) == detecting_origins(m, t, GEOM, SampleConfig(seed=4))


def test_grouping_labels(small_map):
    m, t = small_map
    samples = make_grouping_samples(m, t, noise_sequences=5, seed=0)
    i = 0
    for f in t.features:
        k = f.num_isotopes
        assert samples[i].label == min(k, 5) - 1
        # positive, optional tail, continuations, then the shifted sequence
        n_extra = (1 if k < 5 else 0) + len(range(4, k - 1, 4))
        assert samples[i + 1 + n_extra].label == 0
        i += 2 + n_extra
    assert any(f.num_isotopes == 2 for f in t.features)
    assert all(s.label == 0 for s in samples[-5:])


def test_six_isotope_feature_label():
    cfg = replace(SMALL_MAP, isotopes=(6, 6), n_features=3, n_decoys=0)
    m, t = generate_map(cfg)
    s = make_grouping_samples(scale_intensities(m), t, noise_sequences=0)
    assert s[0].label == 4


# -- loop -----------------------------------------------------------------------------


def test_zero_epochs_unchanged(small_map):
    m, t = small_map
    net = IsoDetectingNet(TINY)
    before = snapshot(net.params)
    res = train("detecting", net, make_detecting_samples(m, t, GEOM)[:4], [], TrainingConfig(epochs=0))
    for k, v in before.items():
        assert np.array_equal(net.params[k].data, v)
        assert np.array_equal(res.best_loss_state[k], v)


def test_overfit_fifty_sequences(small_map):
    m, t = small_map
    samples = make_grouping_samples(m, t, seed=1)[:50]
    net = IsoGroupingNet(GroupingConfig(dropout=0.0, seed=0))
    cfg = TrainingConfig(grouping_batch=50, validate_every=50, plateau_patience=1000, early_stop_patience=1000)
    res = train("grouping", net, samples, [], cfg, epochs=200)
    first, last = res.history[0]["loss"], res.history[-1]["loss"]
    assert last < 0.1 * first


def test_plateau_halves_learning_rate(small_map):
    m, t = small_map
    ws = make_detecting_samples(m, t, GEOM)[:2]
    cfg = TrainingConfig(detecting_batch=2, validate_every=2, plateau_delta=1e9, plateau_patience=5,
                         early_stop_patience=100)
    res = train("detecting", IsoDetectingNet(TINY), ws, ws, cfg, epochs=8)
    lrs = [r["lr"] for r in res.history if r["samples"] % 2 == 0]
    per_epoch = {}
    for r in res.history:
        per_epoch[r["epoch"]] = r["lr"]
    assert per_epoch[0] == 0.001
    assert per_epoch[5] == 0.001 and per_epoch[6] == 0.0005
    assert sorted(set(lrs), reverse=True) == [0.001, 0.0005]


def test_fixed_seed_bit_identical(small_map):
    m, t = small_map
    ws = make_detecting_samples(m, t, GEOM)[:12]
    states = []
    for _ in range(2):
        net = IsoDetectingNet(TINY)
        train("detecting", net, ws, ws[:4], TrainingConfig(epochs=2, detecting_batch=4, validate_every=4))
        states.append(snapshot(net.params))
    for k in states[0]:
        assert np.array_equal(states[0][k], states[1][k])


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train("grouping", IsoGroupingNet(), [], [], TrainingConfig())


def test_fine_tune_empty_is_noop():
    net = IsoGroupingNet()
    before = snapshot(net.params)
    assert fine_tune("grouping", net, [], [], TrainingConfig()) is None
    for k, v in before.items():
        assert np.array_equal(net.params[k].data, v)


def test_fine_tune_uses_small_rate(small_map):
    m, t = small_map
    samples = make_grouping_samples(m, t, seed=2)[:20]
    res = fine_tune("grouping", IsoGroupingNet(), samples, samples, TrainingConfig(fine_tune_epochs=2))
    assert {r["lr"] for r in res.history} == {1e-4}


def test_sensitivity_shapes(small_map):
    m, t = small_map
    ws = make_detecting_samples(m, t, GEOM)[:4]
    res = train("detecting", IsoDetectingNet(TINY), ws, ws, TrainingConfig(epochs=1, detecting_batch=4,
                                                                            validate_every=4))
    assert len(res.history[-1]["sensitivity"]) == 10
    gs = make_grouping_samples(m, t)[:10]
    res = train("grouping", IsoGroupingNet(), gs, gs, TrainingConfig(epochs=1))
    assert len(res.history[-1]["sensitivity"]) == 5


class _NanNet:
    params = {"w": T.Tensor(np.zeros(1), requires_grad=True)}

    def stack(self, chunk):
        n = len(chunk)
        return np.zeros((n, 5, 15, 3)), np.zeros((n, 5)), np.ones(n), np.zeros(n, dtype=np.int64)

    def forward(self, frames, aucs, charges, train=False, rng=None):
        return T.mul(T.broadcast_to(self.params["w"], (len(frames), 5)), float("nan"))


def test_divergence_aborts():
    with pytest.raises(DivergenceError, match="diverged"):
        train("grouping", _NanNet(), [object()] * 3, [], TrainingConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(detecting_lr=0)
    with pytest.raises(ValueError):
        TrainingConfig(epochs=-1)


def test_edge_windows_hold_only_the_monoisotope(small_map):
    m, t = small_map
    cfg = SampleConfig(offsets_per_feature=1, edge_windows=1, noise_windows=0, decoy_windows=0, blank_windows=0)
    origins = detecting_origins(m, t, GEOM, cfg)
    assert [k for k, _ in origins] == ["aligned", "edge"] * len(t.features)
    for f, (_, (s0, mz0)) in zip(t.features, origins[1::2]):
        assert mz0 <= f.mono_mz < mz0 + GEOM.mz_span <= f.isotope_mz[1]
        assert s0 == m.scan_at_rt(f.rt_ranges[0][0])


def test_trimmed_copies_appended_with_feature_labels(small_map):
    m, t = small_map
    plain = make_grouping_samples(m, t, seed=3)
    more = make_grouping_samples(m, t, seed=3, trim_copies=2)
    assert len(more) == len(plain) + 2 * len(t.features)
    extra = more[len(plain):]
    assert [s.label for s in extra] == [min(f.num_isotopes, 5) - 1 for f in t.features] * 2
    assert [s.charge for s in extra] == [f.charge for f in t.features] * 2
