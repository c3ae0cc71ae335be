"""IsoDetecting: point-cloud segmentation of scan windows with four-region surround attention."""
from __future__ import annotations

import csv
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from . import tensor as T
from .lcms import MZ_DECIMALS, SURROUND_NAMES, LcmsMap, Region, ScanWindow, WindowGeometry, cut_region, tile_origins
from .tensor import Tensor, no_grad

NUM_CLASSES = 10


@dataclass
class DetectingConfig:
    local: tuple[int, ...] = (64, 64)
    global_: tuple[int, ...] = (64, 128, 256)
    point: tuple[int, ...] = (256, 128)
    output: tuple[int, ...] = (128, 64, 32)
    mz_span: float = 2.0
    rt_scans: int = 15
    # same-scan neighbourhood encoder; neighbours=0 gives the plain per-point encoder
    neighbours: int = 8
    edge: tuple[int, ...] = (32, 64)
    neighbour_mz: float = 1.1
    edge_octaves: int = 8  # sin/cos encoding of the m/z offset at 2^k pi, k < edge_octaves
    # target points also take same-scan neighbours from the left and right regions
    surround_edges: bool = True
    dtype: str = "float64"
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        return self.point[-1]

    @property
    def local_dim(self) -> int:
        return self.local[-1] + (self.edge[-1] if self.neighbours else 0)


def _mlp_params(params, rng, prefix, sizes, dtype):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.{i}.w"] = T.he_uniform(rng, (a, b), a, dtype)
        params[f"{prefix}.{i}.b"] = T.zeros_param((b,), dtype)


def _mlp(params, prefix, x: Tensor, n: int, last_relu: bool = True) -> Tensor:
    for i in range(n):
        x = T.linear(x, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"])
        if last_relu or i < n - 1:
            x = T.relu(x)
    return x


class IsoDetectingNet:
    """Shared point encoder (local -> global max-pool -> point features), surround
    attention per neighbouring region, and a per-point output MLP over 10 classes."""

    def __init__(self, config: DetectingConfig | None = None):
        self.config = config = config or DetectingConfig()
        rng = np.random.default_rng(config.seed)
        dt = np.dtype(config.dtype)
        p: OrderedDict[str, Tensor] = OrderedDict()
        _mlp_params(p, rng, "local", (3,) + config.local, dt)
        if config.neighbours:
            _mlp_params(p, rng, "edge", (edge_inputs(config.edge_octaves),) + config.edge, dt)
        _mlp_params(p, rng, "global", (config.local_dim,) + config.global_, dt)
        _mlp_params(p, rng, "point", (config.local_dim + config.global_[-1],) + config.point, dt)
        d = config.feature_dim
        for name in SURROUND_NAMES:
            p[f"attn.{name}"] = T.he_uniform(rng, (d, d), d, dt)
        _mlp_params(p, rng, "out", (d,) + config.output + (NUM_CLASSES,), dt)
        self.params = p

    # -- encoder ----------------------------------------------------------------

    def normalize(self, points: np.ndarray) -> np.ndarray:
        c = self.config
        x = np.empty(points.shape, dtype=self.config.dtype)
        x[..., 0] = points[..., 0] / c.rt_scans
        x[..., 1] = points[..., 1] / c.mz_span
        x[..., 2] = np.log1p(np.maximum(points[..., 2], 0.0)) / np.log(256.0)
        return x

    def global_features(self, points: np.ndarray, mask: np.ndarray,
                        edges: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Tensor, Tensor]:
        """Local per-point features [.., N, L] and the masked max-pooled global feature [.., 1, G].

        ``edges`` overrides the within-region neighbour edges (see ``target_edges``)."""
        c, p = self.config, self.params
        x = Tensor(self.normalize(points) * mask[..., None])
        local = _mlp(p, "local", x, len(c.local))
        if c.neighbours:
            if edges is None:
                edges = neighbour_edges(points, mask, c.neighbours, c.neighbour_mz, c.edge_octaves)
            edges, emask = edges
            e = _mlp(p, "edge", Tensor(edges.astype(c.dtype)), len(c.edge))
            e = T.max_pool(e, axis=-2, mask=emask)  # [.., N, 1, E]
            local = T.concat([local, T.reshape(e, e.shape[:-2] + (e.shape[-1],))], axis=-1)
        pre = _mlp(p, "global", local, len(c.global_))
        return local, T.max_pool(pre, axis=-2, mask=mask)

    def point_features(self, points: np.ndarray, mask: np.ndarray,
                       edges: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
        c, p = self.config, self.params
        local, glob = self.global_features(points, mask, edges)
        n = points.shape[-2]
        g = T.broadcast_to(glob, glob.shape[:-2] + (n, glob.shape[-1]))
        pf = _mlp(p, "point", T.concat([local, g], axis=-1), len(c.point))
        return T.mul(pf, mask[..., None].astype(self.config.dtype))

    # -- heads ------------------------------------------------------------------

    def diffuse(self, target_pf: Tensor, region_pfs: Sequence[Tensor | None],
                region_masks: Sequence[np.ndarray | None]) -> Tensor:
        out = target_pf
        for name, rpf, rmask in zip(SURROUND_NAMES, region_pfs, region_masks):
            if rpf is None:
                continue
            out = T.add(out, surround_attention(target_pf, rpf, self.params[f"attn.{name}"], rmask))
        return out

    def classify(self, diffused: Tensor) -> Tensor:
        return _mlp(self.params, "out", diffused, len(self.config.output) + 1, last_relu=False)

    def forward(self, target: np.ndarray, tmask: np.ndarray, surrounds: np.ndarray | None,
                smask: np.ndarray | None) -> Tensor:
        """Logits [B, N, 10] for batched targets [B, N, 3] and surrounds [B, 4, N, 3]."""
        if surrounds is None:
            return self.classify(self.point_features(target, tmask))
        pts = np.concatenate([target[:, None], surrounds], axis=1)
        msk = np.concatenate([tmask[:, None], smask], axis=1)
        edges = None
        if self.uses_target_edges:
            c = self.config
            edges = neighbour_edges(pts, msk, c.neighbours, c.neighbour_mz, c.edge_octaves)
            te, tm = self.target_edges(target, tmask, surrounds, smask)
            edges[0][:, 0], edges[1][:, 0] = te, tm
        pf = self.point_features(pts, msk, edges)  # [B, 5, N, D]
        regions = [pf[:, k + 1] for k in range(4)]
        return self.classify(self.diffuse(pf[:, 0], regions, [smask[:, k] for k in range(4)]))

    @property
    def uses_target_edges(self) -> bool:
        return bool(self.config.neighbours and self.config.surround_edges)

    def target_edges(self, target: np.ndarray, tmask: np.ndarray, surrounds: np.ndarray,
                     smask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Neighbour edges of the target points [B, N] with the left and right regions
        [B, 4, N] moved into the target frame, so spacing across an m/z edge is visible."""
        c = self.config
        parts, masks = [target], [tmask]
        for name, shift in (("left", -c.mz_span), ("right", c.mz_span)):
            k = SURROUND_NAMES.index(name)
            p = surrounds[:, k].copy()
            p[..., 1] = np.round(p[..., 1] + shift, MZ_DECIMALS)
            parts.append(p)
            masks.append(smask[:, k])
        e, em = neighbour_edges(np.concatenate(parts, axis=-2), np.concatenate(masks, axis=-1),
                                c.neighbours, c.neighbour_mz, c.edge_octaves)
        n = target.shape[-2]
        return e[:, :n], em[:, :n]

    def load(self, arrays) -> None:
        for k, p in self.params.items():
            if k not in arrays or arrays[k].shape != p.data.shape:
                raise ValueError(f"checkpoint does not match network at {k!r}")
            p.data = np.array(arrays[k], dtype=p.data.dtype)


def edge_inputs(octaves: int) -> int:
    return 3 + 2 * octaves


def neighbour_edges(points: np.ndarray, mask: np.ndarray, k: int, max_dmz: float,
                    octaves: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Edge inputs to the k nearest same-scan points within ``max_dmz`` Th.

    Returns edges [.., N, k, 3 + 2*octaves] holding the signed m/z offset scaled by
    1/max_dmz, the log-intensity difference and neighbour log-intensity (both over
    log(256)), then sin/cos of the raw offset at 2^j pi, plus the edge mask.
    """
    lead = points.shape[:-2]
    n = points.shape[-2]
    pts = points.reshape(-1, n, 3)
    msk = mask.reshape(-1, n)
    rows = pts.shape[0]
    # in (scan, mz) order the k nearest same-scan neighbours sit within k positions
    order = np.lexsort((pts[..., 1], pts[..., 0], ~msk), axis=-1)
    inv = np.argsort(order, axis=-1)
    srt = np.take_along_axis(pts, order[..., None], axis=1)
    sm = np.take_along_axis(msk, order, axis=-1)
    scan, mz = srt[..., 0], srt[..., 1]
    li = np.log1p(np.maximum(srt[..., 2], 0.0)) / np.log(256.0)
    offs = np.array([o for o in range(-k, k + 1) if o], dtype=np.int64)
    j = np.arange(n)[:, None] + offs[None, :]  # [N, 2k]
    inside = (j >= 0) & (j < n)
    jc = np.clip(j, 0, n - 1)
    r = np.arange(rows)[:, None, None]
    d = mz[r, jc] - mz[..., None]
    ok = (inside & sm[r, jc] & sm[..., None] & (scan[r, jc] == scan[..., None])
          & (np.abs(d) <= max_dmz))
    # nearest first; the signed offset breaks ties so the choice is order-independent
    pick = np.lexsort((d, np.where(ok, np.abs(d), np.inf)), axis=-1)[..., :k]
    emask = np.take_along_axis(ok, pick, axis=-1)
    d = np.take_along_axis(d, pick, axis=-1)
    lj = li[r, np.take_along_axis(np.broadcast_to(jc, ok.shape), pick, axis=-1)]
    cols = [d / max_dmz, lj - li[..., None], lj]
    for q in range(octaves):
        w = np.pi * 2.0 ** q
        cols += [np.sin(w * d), np.cos(w * d)]
    edges = np.stack(cols, axis=-1) * emask[..., None]
    edges = np.take_along_axis(edges, inv[..., None, None], axis=1)
    emask = np.take_along_axis(emask, inv[..., None], axis=1)
    return edges.reshape(lead + (n, k, edge_inputs(octaves))), emask.reshape(lead + (n, k))


def surround_attention(target_pf: Tensor, region_pf: Tensor, weight: Tensor,
                       region_mask: np.ndarray | None = None) -> Tensor:
    """Attention of a neighbouring region on the target points.

    impact = softmax over region points of target_pf @ region_pf^T (one distribution per
    target point); returns (impact @ region_pf) @ weight.  Masked region rows are outside
    the softmax support; an empty region contributes zeros.
    """
    if target_pf.shape[-1] != region_pf.shape[-1] or weight.shape != (target_pf.shape[-1],) * 2:
        raise T.ShapeError("surround_attention", target_pf.shape, region_pf.shape, weight.shape)
    scores = T.matmul(target_pf, T.transpose(region_pf))
    mask = None if region_mask is None else np.expand_dims(region_mask, -2)
    impact = T.softmax(scores, axis=-1, mask=mask)
    return T.matmul(T.matmul(impact, region_pf), weight)


def attention_impact(target_pf: np.ndarray, region_pf: np.ndarray, region_mask=None) -> np.ndarray:
    with no_grad():
        scores = T.matmul(Tensor(target_pf), T.transpose(Tensor(region_pf)))
        mask = None if region_mask is None else np.expand_dims(region_mask, -2)
        return T.softmax(scores, axis=-1, mask=mask).data


def class_weights(labels: np.ndarray, mask: np.ndarray, single_class_weight: float = 0.5) -> np.ndarray:
    """Per-point weight 1 - (share of the point's class among the sample's valid points).

    Padding rows get 0.  A sample holding a single class would get weight 0 everywhere
    under the rule, so it gets ``single_class_weight`` instead.
    """
    w = np.zeros(labels.shape, dtype=np.float64)
    valid = labels[mask]
    if valid.size == 0:
        return w
    counts = np.bincount(valid, minlength=NUM_CLASSES)
    if np.count_nonzero(counts) == 1:
        w[mask] = single_class_weight
        return w
    w[mask] = 1.0 - counts[valid] / valid.size
    return w


def segment_window(net: IsoDetectingNet, window: ScanWindow, use_surrounds: bool = True):
    """Per-point class labels [N] and probabilities [N, 10]; padding rows are labelled 0."""
    tgt = window.target
    with no_grad():
        if use_surrounds:
            s = window.surround_list()
            logits = net.forward(tgt.points[None], tgt.mask[None],
                                 np.stack([r.points for r in s])[None], np.stack([r.mask for r in s])[None])
        else:
            logits = net.forward(tgt.points[None], tgt.mask[None], None, None)
        probs = T.softmax(logits, axis=-1).data[0]
    labels = np.where(tgt.mask, probs.argmax(axis=-1), 0)
    return labels, probs


# -- scanning -----------------------------------------------------------------------

@dataclass
class IsotopeTrace:
    """One detected isotope: a contiguous run of same-charge points at one m/z."""
    charge: int
    mz: float
    scans: np.ndarray
    intensities: np.ndarray  # scaled, per scan in ``scans``
    point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def scan_start(self) -> int:
        return int(self.scans[0])

    @property
    def scan_end(self) -> int:
        return int(self.scans[-1])

    @property
    def peak_scan(self) -> int:
        return int(self.scans[int(np.argmax(self.intensities))])


@dataclass
class DetectionTables:
    """Nine m/z-keyed tables (charge 1..9) of detected isotope traces."""
    tables: dict[int, dict[float, list[IsotopeTrace]]] = field(
        default_factory=lambda: {z: {} for z in range(1, NUM_CLASSES)})

    def add(self, trace: IsotopeTrace) -> None:
        self.tables[trace.charge].setdefault(trace.mz, []).append(trace)

    def traces(self, charge: int | None = None) -> list[IsotopeTrace]:
        zs = range(1, NUM_CLASSES) if charge is None else [charge]
        out = []
        for z in zs:
            for key in sorted(self.tables[z]):
                out.extend(sorted(self.tables[z][key], key=lambda t: t.scan_start))
        return out

    def __len__(self) -> int:
        return sum(len(v) for tab in self.tables.values() for v in tab.values())

    def write_tsv(self, m: LcmsMap, stream: IO[str]) -> None:
        w = csv.writer(stream, delimiter="\t", lineterminator="\n")
        w.writerow(["charge", "isotope_mz", "rt_start", "rt_end", "intensities"])
        for t in self.traces():
            w.writerow([t.charge, repr(t.mz), repr(float(m.rts[t.scan_start])), repr(float(m.rts[t.scan_end])),
                        ";".join(repr(float(x)) for x in t.intensities)])


def weighted_mz(bins: Sequence[tuple[float, float]]) -> float:
    """Intensity-weighted mean m/z of (mz, intensity) bins, rounded to 4 decimals."""
    pairs = [(mz, i) for mz, i in bins if i > 0]
    if not pairs:
        raise ValueError("weighted_mz needs at least one bin with positive intensity")
    arr = np.asarray(pairs, dtype=np.float64)
    return round(float(np.sum(arr[:, 0] * arr[:, 1]) / np.sum(arr[:, 1])), 4)


@dataclass
class ScanConfig:
    mz_merge_tol: float = 0.002  # Th; positive points closer than this belong to one isotope
    max_gap_scans: int = 2  # silent scans tolerated inside one isotope run
    min_points: int = 2
    batch_size: int = 32
    # runs are formed from all positive points and take the majority charge; False keeps
    # strictly same-charge runs
    charge_vote: bool = True


def build_tables(m: LcmsMap, predictions: np.ndarray, config: ScanConfig | None = None) -> DetectionTables:
    """Group per-point charge predictions (0 = noise) into isotope traces."""
    config = config or ScanConfig()
    tables = DetectionTables()
    if config.charge_vote:
        passes = [(None, np.flatnonzero(predictions > 0))]
    else:
        passes = [(z, np.flatnonzero(predictions == z)) for z in range(1, NUM_CLASSES)]
    for z, idx in passes:
        if not len(idx):
            continue
        order = idx[np.argsort(m.mz[idx], kind="stable")]
        mz_sorted = m.mz[order]
        cuts = np.flatnonzero(np.diff(mz_sorted) > config.mz_merge_tol) + 1
        for group in np.split(order, cuts):
            for run in _rt_runs(m, group, config.max_gap_scans):
                charge = z if z is not None else int(np.argmax(np.bincount(predictions[run])[1:])) + 1
                trace = _make_trace(m, charge, run)
                if len(trace.scans) >= config.min_points:
                    tables.add(trace)
    return tables


def _rt_runs(m: LcmsMap, group: np.ndarray, max_gap: int) -> list[np.ndarray]:
    scans = m.scan_index[group]
    order = np.argsort(scans, kind="stable")
    group, scans = group[order], scans[order]
    cuts = np.flatnonzero(np.diff(scans) > max_gap + 1) + 1
    return np.split(group, cuts)


def _make_trace(m: LcmsMap, charge: int, ids: np.ndarray) -> IsotopeTrace:
    scans = m.scan_index[ids]
    uniq, inv = np.unique(scans, return_inverse=True)
    per_scan = np.zeros(len(uniq))
    np.add.at(per_scan, inv, m.intensity[ids])
    # per-bin summed intensity for the weighted key
    mz_vals, mz_inv = np.unique(m.mz[ids], return_inverse=True)
    bin_int = np.zeros(len(mz_vals))
    np.add.at(bin_int, mz_inv, m.intensity[ids])
    if bin_int.sum() > 0:
        key = weighted_mz(list(zip(mz_vals.tolist(), bin_int.tolist())))
    else:
        key = round(float(mz_vals.mean()), 4)
    return IsotopeTrace(charge, key, uniq, per_scan, np.sort(ids))


def _tile_grid(m: LcmsMap, geom: WindowGeometry, mz_lo: float, n_mz: int, n_rt: int):
    return {(r, c): (r * geom.rt_scans, round(mz_lo + c * geom.mz_span, 6))
            for r in range(-1, n_rt + 1) for c in range(-1, n_mz + 1)}


def predict_points(net: IsoDetectingNet, m: LcmsMap, geom: WindowGeometry,
                   use_surrounds: bool = True, sections: int = 1, batch_size: int = 32) -> np.ndarray:
    """Per-point class predictions over a non-overlapping tiling of the whole map."""
    pred = np.zeros(m.num_points, dtype=np.int64)
    if m.num_points == 0:
        return pred
    origins = tile_origins(m, geom)
    mz_lo = origins[0][1]
    n_mz = len({o[1] for o in origins})
    n_rt = len({o[0] for o in origins})
    grid = _tile_grid(m, geom, mz_lo, n_mz, n_rt)
    bands = [list(b) for b in np.array_split(np.arange(n_mz), max(1, min(sections, n_mz)))]

    def run(band):
        return _predict_band(net, m, geom, grid, band, n_rt, use_surrounds, batch_size)

    if len(bands) == 1:
        results = [run(bands[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(bands)) as ex:
            results = list(ex.map(run, bands))
    for ids, labels in results:
        pred[ids] = labels
    return pred


def _predict_band(net, m, geom, grid, band, n_rt, use_surrounds, batch_size):
    cols = set(band)
    need = set()
    for r in range(n_rt):
        for c in band:
            need.add((r, c))
            if use_surrounds:
                need.update({(r, c - 1), (r, c + 1), (r - 1, c), (r + 1, c)})
    keys = sorted(need)
    regions = {k: cut_region(m, grid[k][0], grid[k][1], geom) for k in keys}
    feats: dict = {}
    with no_grad():
        nonempty = [k for k in keys if regions[k].count]
        for i in range(0, len(nonempty), batch_size):
            chunk = nonempty[i:i + batch_size]
            pts = np.stack([regions[k].points for k in chunk])
            msk = np.stack([regions[k].mask for k in chunk])
            pf = net.point_features(pts, msk).data
            for k, f in zip(chunk, pf):
                feats[k] = f
        targets = [k for k in keys if k[1] in cols and 0 <= k[0] < n_rt and regions[k].count]
        neighbours = {"left": (0, -1), "right": (0, 1), "below": (-1, 0), "above": (1, 0)}
        own = feats
        if use_surrounds and net.uses_target_edges:
            # as a target, a tile is encoded again with edges reaching into its m/z neighbours
            own = {}
            empty = np.zeros((geom.max_points, 3)), np.zeros(geom.max_points, bool)
            for i in range(0, len(targets), batch_size):
                chunk = targets[i:i + batch_size]
                pts = np.stack([regions[k].points for k in chunk])
                msk = np.stack([regions[k].mask for k in chunk])
                sur = [[(regions[q].points, regions[q].mask) if name in ("left", "right") and q in regions
                        else empty for name in SURROUND_NAMES
                        for q in [(k[0] + neighbours[name][0], k[1] + neighbours[name][1])]]
                       for k in chunk]
                spts = np.stack([[p for p, _ in row] for row in sur])
                smsk = np.stack([[q for _, q in row] for row in sur])
                pf = net.point_features(pts, msk, net.target_edges(pts, msk, spts, smsk)).data
                for k, f in zip(chunk, pf):
                    own[k] = f
        ids, labels = [], []
        for i in range(0, len(targets), batch_size):
            chunk = targets[i:i + batch_size]
            tpf = Tensor(np.stack([own[k] for k in chunk]))
            rpfs, rmasks = [], []
            for name in SURROUND_NAMES:
                if not use_surrounds:
                    rpfs.append(None)
                    rmasks.append(None)
                    continue
                dr, dc = neighbours[name]
                nk = [(k[0] + dr, k[1] + dc) for k in chunk]
                d = tpf.shape[-1]
                rpfs.append(Tensor(np.stack([feats.get(q, np.zeros((geom.max_points, d), dtype=tpf.data.dtype))
                                             for q in nk])))
                rmasks.append(np.stack([regions[q].mask if q in feats else np.zeros(geom.max_points, bool)
                                        for q in nk]))
            logits = net.classify(net.diffuse(tpf, rpfs, rmasks)).data
            for k, lg in zip(chunk, logits):
                reg = regions[k]
                ids.append(reg.index[reg.mask])
                labels.append(lg.argmax(axis=-1)[reg.mask])
    if not ids:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ids), np.concatenate(labels)


def scan_map(net: IsoDetectingNet, m: LcmsMap, geom: WindowGeometry, sections: int = 1,
             use_surrounds: bool = True, config: ScanConfig | None = None) -> DetectionTables:
    config = config or ScanConfig()
    pred = predict_points(net, m, geom, use_surrounds, sections, config.batch_size)
    return build_tables(m, pred, config)
