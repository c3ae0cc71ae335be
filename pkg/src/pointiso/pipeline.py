"""End-to-end orchestration: scaled map -> detection tables -> clusters -> feature table."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from typing import IO

from .detecting import DetectingConfig, IsoDetectingNet, ScanConfig, scan_map
from .features import PeptideFeature
from .grouping import (ClusterConfig, GroupingConfig, IsoGroupingNet, cluster_isotopes, net_classifier,
                       scan_cluster)
from .lcms import LcmsMap, WindowGeometry, scale_intensities
from .optim import load_checkpoint, save_checkpoint


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class PipelineConfig:
    geometry: WindowGeometry = field(default_factory=WindowGeometry)
    sections: int = 1
    use_surrounds: bool = True
    scan: ScanConfig = field(default_factory=ScanConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)


def check_geometry(net: IsoDetectingNet, geom: WindowGeometry) -> None:
    c = net.config
    if abs(c.mz_span - geom.mz_span) > 1e-12 or c.rt_scans != geom.rt_scans:
        raise CheckpointMismatchError(
            f"detecting checkpoint expects {c.mz_span} Th x {c.rt_scans} scans windows, "
            f"got {geom.mz_span} Th x {geom.rt_scans} scans")


def run_pipeline(m: LcmsMap, det: IsoDetectingNet, grp: IsoGroupingNet,
                 config: PipelineConfig | None = None) -> tuple[list[PeptideFeature], dict]:
    """Returns the features (sorted by m/z, RT, charge) and run metadata."""
    config = config or PipelineConfig()
    check_geometry(det, config.geometry)
    times = {}
    t0 = time.perf_counter()
    if m.intensity_scale is None and m.num_points:
        m = scale_intensities(m)
    times["scale"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tables = scan_map(det, m, config.geometry, config.sections, config.use_surrounds, config.scan)
    times["detect"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    clusters = cluster_isotopes(tables, m, config.cluster)
    times["cluster"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    classify = net_classifier(grp)
    features = [f for c in clusters for f in scan_cluster(c, classify, m)]
    features.sort(key=lambda f: (f.mono_mz, f.peak_rt, f.charge))
    times["group"] = time.perf_counter() - t0

    meta = {
        "points": m.num_points,
        "scans": m.num_scans,
        "isotopes": len(tables),
        "clusters": len(clusters),
        "features": len(features),
        "timings_s": {k: round(v, 4) for k, v in times.items()},
    }
    return features, meta


# -- checkpoints carrying their network configuration --------------------------------

def _config_from_meta(cls, raw: dict):
    kw = {}
    for f in fields(cls):
        if f.name in raw:
            v = raw[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def save_network(net, stream: IO[str], extra: dict | None = None) -> None:
    module = "detecting" if isinstance(net, IsoDetectingNet) else "grouping"
    meta = {"module": module, "config": asdict(net.config)}
    meta.update(extra or {})
    save_checkpoint(net.params, stream, meta)


def load_network(stream: IO[str], module: str | None = None):
    arrays, meta = load_checkpoint(stream)
    kind = meta.get("module")
    if kind not in ("detecting", "grouping"):
        raise CheckpointMismatchError("checkpoint does not record which network it holds")
    if module is not None and kind != module:
        raise CheckpointMismatchError(f"expected a {module} checkpoint, got {kind}")
    if kind == "detecting":
        net = IsoDetectingNet(_config_from_meta(DetectingConfig, meta.get("config", {})))
    else:
        net = IsoGroupingNet(_config_from_meta(GroupingConfig, meta.get("config", {})))
    try:
        net.load(arrays)
    except ValueError as e:
        raise CheckpointMismatchError(str(e)) from e
    return net
