"""Scaled-down synthetic experiments: train both networks, then measure detection,
the surround ablation, intensity fidelity and the decoy fine-tuning trade-off."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .detecting import DetectingConfig, IsoDetectingNet
from .evaluation import (decoy_origin_emissions, detection_by_charge, intensity_correlation,
                         match_features)
from .grouping import GroupingConfig, IsoGroupingNet
from .lcms import LcmsMap, WindowGeometry, scale_intensities
from .optim import restore, snapshot
from .pipeline import PipelineConfig, run_pipeline, save_network
from .synth import GroundTruth, SynthConfig, generate_map
from .training import (SampleConfig, TrainingConfig, fine_tune, make_detecting_samples,
                       make_grouping_samples, train, windows_from_features)

log = logging.getLogger(__name__)

DECOY_RICH_MIX = {"speckle": 1.0, "trace": 1.0, "doublet": 1.0, "shadow": 6.0}


@dataclass
class ExperimentConfig:
    train_seeds: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    val_seed: int = 9
    test_seeds: tuple[int, ...] = (101, 102)
    clean_seeds: tuple[int, ...] = (201, 202)
    decoy_train_seeds: tuple[int, ...] = (301, 302, 303, 304)
    decoy_val_seed: int = 309
    decoy_test_seeds: tuple[int, ...] = (401, 402)
    decoy_rich_decoys: int = 60
    synth: SynthConfig = field(default_factory=SynthConfig)
    geometry: WindowGeometry = field(default_factory=lambda: WindowGeometry(max_points=256))
    detecting: DetectingConfig = field(default_factory=lambda: DetectingConfig(dtype="float32"))
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(epochs=12))
    samples: SampleConfig = field(default_factory=lambda: SampleConfig(edge_windows=1))
    grouping_epochs: int = 60
    grouping_trim_copies: int = 2
    val_windows: int = 400
    harvest_offsets: int = 6
    fine_tune_epochs: int = 5
    sections: int = 1


def make_maps(base: SynthConfig, seeds, **overrides) -> list[tuple[LcmsMap, GroundTruth]]:
    return [generate_map(replace(base, seed=s, **overrides)) for s in seeds]


def _scaled(maps):
    return [(scale_intensities(m), t) for m, t in maps]


def train_models(cfg: ExperimentConfig, metrics=None) -> tuple[IsoDetectingNet, IsoGroupingNet, dict]:
    t_start = time.perf_counter()
    train_maps = _scaled(make_maps(cfg.synth, cfg.train_seeds))
    (vm, vt), = _scaled(make_maps(cfg.synth, [cfg.val_seed]))
    det_train = [w for i, (m, t) in enumerate(train_maps)
                 for w in make_detecting_samples(m, t, cfg.geometry, replace(cfg.samples, seed=cfg.train_seeds[i]))]
    det_val = make_detecting_samples(vm, vt, cfg.geometry, replace(cfg.samples, seed=cfg.val_seed))
    rng = np.random.default_rng(cfg.val_seed)
    if len(det_val) > cfg.val_windows:
        det_val = [det_val[i] for i in np.sort(rng.choice(len(det_val), cfg.val_windows, replace=False))]
    trim = cfg.grouping_trim_copies
    grp_train = [g for i, (m, t) in enumerate(train_maps)
                 for g in make_grouping_samples(m, t, seed=cfg.train_seeds[i], trim_copies=trim)]
    grp_val = make_grouping_samples(vm, vt, seed=cfg.val_seed, trim_copies=trim)

    det = IsoDetectingNet(cfg.detecting)
    t0 = time.perf_counter()
    res_d = train("detecting", det, det_train, det_val, cfg.training, metrics=metrics)
    restore(det.params, res_d.best_loss_state)
    t_det = time.perf_counter() - t0

    grp = IsoGroupingNet(cfg.grouping)
    t0 = time.perf_counter()
    res_g = train("grouping", grp, grp_train, grp_val, cfg.training, epochs=cfg.grouping_epochs, metrics=metrics)
    restore(grp.params, res_g.best_loss_state)
    t_grp = time.perf_counter() - t0
    info = {
        "detecting_windows": len(det_train),
        "grouping_sequences": len(grp_train),
        "detecting_epochs": res_d.history[-1]["epoch"] + 1 if res_d.history else 0,
        "grouping_epochs": res_g.history[-1]["epoch"] + 1 if res_g.history else 0,
        "detecting_val_sensitivity": res_d.history[-1]["sensitivity"] if res_d.history else [],
        "grouping_val_sensitivity": res_g.history[-1]["sensitivity"] if res_g.history else [],
        "train_seconds": {"detecting": t_det, "grouping": t_grp, "total": time.perf_counter() - t_start},
    }
    return det, grp, info


def evaluate(det, grp, maps, cfg: ExperimentConfig, use_surrounds: bool = True) -> dict:
    """Detection metrics pooled over maps (raw, unscaled maps with their truth)."""
    pcfg = PipelineConfig(geometry=cfg.geometry, sections=cfg.sections, use_surrounds=use_surrounds)
    matched = total = emitted = false = decoy = 0
    z23_hit = z23_total = 0
    pairs_auc: list[tuple[float, float]] = []
    for m, t in maps:
        feats, _ = run_pipeline(m, det, grp, pcfg)
        rep = match_features(feats, t.features)
        matched += rep.matched
        total += rep.total_truth
        emitted += len(feats)
        false += len(rep.unmatched_detected)
        decoy += len(decoy_origin_emissions(feats, rep, t.decoys))
        sel = [j for j, f in enumerate(t.features) if f.charge in (2, 3)]
        hit = {j for _, j in rep.pairs}
        z23_total += len(sel)
        z23_hit += sum(j in hit for j in sel)
        pairs_auc += [(feats[i].intensity_auc, t.features[j].auc) for i, j in rep.pairs]
    return {
        "truth": total, "matched": matched, "emitted": emitted,
        "detection_pct": 100.0 * matched / total if total else 0.0,
        "detection_z23_pct": 100.0 * z23_hit / z23_total if z23_total else 0.0,
        "false_emission_pct": 100.0 * false / emitted if emitted else 0.0,
        "decoy_origin": decoy,
        "auc_pairs": pairs_auc,
    }


def straddle_fraction(maps, geom: WindowGeometry) -> float:
    """Share of planted features whose extent crosses a tile boundary of the scan."""
    n = hit = 0
    for m, t in maps:
        lo = np.floor(m.mz_min)
        for f in t.features:
            s0, s1 = m.scan_at_rt(f.rt_ranges[0][0]), m.scan_at_rt(f.rt_ranges[0][1])
            c0 = int(np.floor((f.isotope_mz[0] - lo) / geom.mz_span))
            c1 = int(np.floor((f.isotope_mz[-1] - lo) / geom.mz_span))
            n += 1
            hit += (c0 != c1) or (s0 // geom.rt_scans != s1 // geom.rt_scans)
    return hit / n if n else 0.0


def harvest_windows(det, grp, maps, cfg: ExperimentConfig, seed: int):
    """Windows around emissions that match no planted feature, labelled from the truth."""
    pcfg = PipelineConfig(geometry=cfg.geometry, sections=cfg.sections)
    out = []
    for k, (m, t) in enumerate(maps):
        feats, _ = run_pipeline(m, det, grp, pcfg)
        rep = match_features(feats, t.features)
        missed = [feats[i] for i in rep.unmatched_detected]
        out += windows_from_features(scale_intensities(m), t, cfg.geometry, missed,
                                     offsets=cfg.harvest_offsets, seed=seed + k,
                                     single_class_weight=cfg.samples.single_class_weight)
    return out


def copy_detecting(net: IsoDetectingNet) -> IsoDetectingNet:
    twin = IsoDetectingNet(net.config)
    restore(twin.params, snapshot(net.params))
    return twin


def _strip(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "auc_pairs"}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Everything the synthetic acceptance checks need, as one JSON-able dict."""
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    metrics = open(out / "metrics.jsonl", "w") if out else None
    try:
        det, grp, info = train_models(cfg, metrics)
    finally:
        if metrics:
            metrics.close()
    if out:
        with open(out / "detecting.json", "w") as fh:
            save_network(det, fh)
        with open(out / "grouping.json", "w") as fh:
            save_network(grp, fh)

    test_maps = make_maps(cfg.synth, cfg.test_seeds)
    base = evaluate(det, grp, test_maps, cfg)
    wall = time.perf_counter() - t0
    ablated = evaluate(det, grp, test_maps, cfg, use_surrounds=False)

    clean = evaluate(det, grp, make_maps(cfg.synth, cfg.clean_seeds, noise_density=0.0, n_decoys=0), cfg)
    xs, ys = zip(*clean["auc_pairs"]) if clean["auc_pairs"] else ((), ())
    r = intensity_correlation(xs, ys) if len(xs) >= 2 else float("nan")

    rich = dict(n_decoys=cfg.decoy_rich_decoys, decoy_mix=DECOY_RICH_MIX)
    before = evaluate(det, grp, make_maps(cfg.synth, cfg.decoy_test_seeds, **rich), cfg)
    harvest = harvest_windows(det, grp, make_maps(cfg.synth, cfg.decoy_train_seeds, **rich), cfg, seed=500)
    harvest_val = harvest_windows(det, grp, make_maps(cfg.synth, [cfg.decoy_val_seed], **rich), cfg, seed=600)
    tuned = copy_detecting(det)
    fine_tune("detecting", tuned, harvest, harvest_val, cfg.training, epochs=cfg.fine_tune_epochs)
    after = evaluate(tuned, grp, make_maps(cfg.synth, cfg.decoy_test_seeds, **rich), cfg)
    if out:
        with open(out / "detecting_finetuned.json", "w") as fh:
            save_network(tuned, fh)

    result = {
        "training": info,
        "detection": _strip(base),
        "wall_clock_seconds": wall,
        "ablation": {"with_surrounds": base["detection_pct"], "without_surrounds": ablated["detection_pct"],
                     "straddle_fraction": straddle_fraction(test_maps, cfg.geometry)},
        "intensity": {"pearson_r": r, "pairs": len(xs)},
        "fine_tune": {"harvested_windows": len(harvest), "before": _strip(before), "after": _strip(after)},
        "config": json.loads(json.dumps(asdict(cfg), default=str)),
    }
    if out:
        with open(out / "results.json", "w") as fh:
            json.dump(result, fh, indent=2)
    return result
