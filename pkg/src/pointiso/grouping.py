"""IsoGrouping: resolution degradation, isotope clustering and 5-frame boundary classification."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .detecting import DetectionTables, IsotopeTrace
from .features import PeptideFeature
from .lcms import LcmsMap
from .synth import isotope_spacing
from .tensor import Tensor, no_grad

GROUP_SIZE = 5
FRAME_ROWS = 15
FRAME_COLS = 3
HALF_ROWS = FRAME_ROWS // 2
NUM_GROUP_CLASSES = 5


@dataclass
class Frame:
    grid: np.ndarray  # [15 x 3] scaled intensities
    auc: float  # raw units
    valid: bool = True


def blank_frame() -> Frame:
    return Frame(np.zeros((FRAME_ROWS, FRAME_COLS)), 0.0, False)


@dataclass
class Isotope:
    mz: float  # detection key, 4 decimals
    mz_2dec: float
    scans: np.ndarray
    intensities: np.ndarray  # scaled, max-filtered within the ppm window
    peak_scan: int
    auc: float
    frame: Frame


@dataclass
class IsotopeCluster:
    charge: int
    isotopes: list[Isotope] = field(default_factory=list)


def ppm_window(mz: float, ppm: float = 2.0) -> tuple[float, float]:
    r = mz * ppm / 1e6
    return round(mz - r, 4), round(mz + r, 4)


def degrade_resolution(m: LcmsMap, mz: float, scan_lo: int, scan_hi: int,
                       ppm: float = 2.0) -> tuple[float, np.ndarray, np.ndarray]:
    """2-decimal m/z plus, per scan in [scan_lo, scan_hi], the max intensity within +-ppm of ``mz``."""
    lo, hi = ppm_window(mz, ppm)
    scans = np.arange(max(scan_lo, 0), min(scan_hi, m.num_scans - 1) + 1)
    vals = np.zeros(len(scans))
    for k, s in enumerate(scans):
        a, b = m.scan_offsets[s], m.scan_offsets[s + 1]
        i = a + np.searchsorted(m.mz[a:b], lo - 1e-9, side="left")
        j = a + np.searchsorted(m.mz[a:b], hi + 1e-9, side="right")
        if j > i:
            vals[k] = m.intensity[i:j].max()
    return round(mz, 2), scans, vals


def make_isotope(m: LcmsMap, mz: float, scan_lo: int, scan_hi: int, ppm: float = 2.0) -> Isotope:
    mz2, scans, vals = degrade_resolution(m, mz, scan_lo, scan_hi, ppm)
    peak = int(scans[int(np.argmax(vals))]) if len(scans) else scan_lo
    iso = Isotope(mz, mz2, scans, vals, peak, 0.0, blank_frame())
    iso.frame = build_frame(iso, m)
    iso.auc = iso.frame.auc
    return iso


def build_frame(iso: Isotope, m: LcmsMap) -> Frame:
    """15 x 3 grid centred on the peak scan; the signal fills column 0, rows outside the
    isotope's scan range stay zero.  AUC is the raw-intensity sum over the range."""
    grid = np.zeros((FRAME_ROWS, FRAME_COLS))
    rows = iso.scans - iso.peak_scan + HALF_ROWS
    inside = (rows >= 0) & (rows < FRAME_ROWS)
    grid[rows[inside], 0] = iso.intensities[inside]
    scale = m.intensity_scale or 1.0
    return Frame(grid, float(iso.intensities.sum() / scale), True)


def frame_from_trace_profile(m: LcmsMap, mz: float, rt_start: float, rt_end: float) -> Frame:
    return make_isotope(m, mz, m.scan_at_rt(rt_start), m.scan_at_rt(rt_end)).frame


def isotope_from_trace(m: LcmsMap, trace: IsotopeTrace, ppm: float = 2.0) -> Isotope:
    return make_isotope(m, trace.mz, trace.scan_start, trace.scan_end, ppm)


@dataclass
class ClusterConfig:
    mz_tol: float = 0.01
    min_overlap_scans: int = 1
    ppm: float = 2.0
    spacing_table: str = "standard"


def _overlap(a: Isotope, b: Isotope) -> int:
    return int(min(a.scans[-1], b.scans[-1]) - max(a.scans[0], b.scans[0]) + 1)


def chain_isotopes(isotopes: Sequence[Isotope], charge: int, config: ClusterConfig | None = None) -> list[IsotopeCluster]:
    """Greedy left-to-right chaining of same-charge isotopes into equidistant sequences."""
    config = config or ClusterConfig()
    step = isotope_spacing(charge, config.spacing_table)
    clusters: list[IsotopeCluster] = []
    for iso in sorted(isotopes, key=lambda x: (x.mz, int(x.scans[0]))):
        best, best_key = None, None
        for c in clusters:
            last = c.isotopes[-1]
            err = abs(iso.mz - last.mz - step)
            ov = _overlap(last, iso)
            if err <= config.mz_tol + 1e-9 and ov >= config.min_overlap_scans:
                key = (err, -ov)
                if best_key is None or key < best_key:
                    best, best_key = c, key
        if best is None:
            clusters.append(IsotopeCluster(charge, [iso]))
        else:
            best.isotopes.append(iso)
    return clusters


def cluster_isotopes(tables: DetectionTables, m: LcmsMap, config: ClusterConfig | None = None) -> list[IsotopeCluster]:
    config = config or ClusterConfig()
    out = []
    for z in range(1, 10):
        isos = [isotope_from_trace(m, t, config.ppm) for t in tables.traces(z)]
        out.extend(chain_isotopes(isos, z, config))
    return out


def group_label(num_isotopes: int) -> int:
    """Class of a sequence starting at a feature's first isotope: index of the frame
    holding its last isotope, capped at 4."""
    return 0 if num_isotopes < 2 else min(num_isotopes, GROUP_SIZE) - 1


# -- network ------------------------------------------------------------------------

@dataclass
class GroupingConfig:
    conv1: int = 8
    conv2: int = 16
    embed: int = 8
    frame_fc: tuple[int, ...] = (16, 8)
    combine: int = 32
    fc: tuple[int, ...] = (128, 64)
    final: tuple[int, ...] = (32,)
    dropout: float = 0.5  # after the combining FC layers
    frame_dropout: float = 0.0  # after the narrow per-frame FC layers
    auc_buckets: int = 16
    auc_log10_range: tuple[float, float] = (2.0, 10.0)
    dtype: str = "float64"
    seed: int = 0


class IsoGroupingNet:
    """Per-frame conv encoder shared over five frames, a combining convolution, a
    noise-probability head gating the charge input, and a 5-way softmax."""

    def __init__(self, config: GroupingConfig | None = None):
        self.config = c = config or GroupingConfig()
        rng = np.random.default_rng(c.seed)
        dt = np.dtype(c.dtype)
        p: OrderedDict[str, Tensor] = OrderedDict()
        p["conv1.w"] = T.he_uniform(rng, (c.conv1, 1, 3, 3), 9, dt)
        p["conv1.b"] = T.zeros_param((c.conv1,), dt)
        p["conv2.w"] = T.he_uniform(rng, (c.conv2, c.conv1, 3, 3), 9 * c.conv1, dt)
        p["conv2.b"] = T.zeros_param((c.conv2,), dt)
        p["auc_embed"] = Tensor(rng.normal(0, 0.5, (c.auc_buckets, c.embed)).astype(dt), requires_grad=True)
        flat = c.conv2 * (FRAME_ROWS // 4) * FRAME_COLS + c.embed
        sizes = (flat,) + c.frame_fc
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            p[f"frame.{i}.w"] = T.he_uniform(rng, (a, b), a, dt)
            p[f"frame.{i}.b"] = T.zeros_param((b,), dt)
        ff = c.frame_fc[-1]
        p["combine.w"] = T.he_uniform(rng, (c.combine, 1, 2, ff), 2 * ff, dt)
        p["combine.b"] = T.zeros_param((c.combine,), dt)
        sizes = (c.combine * (GROUP_SIZE - 1),) + c.fc
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            p[f"fc.{i}.w"] = T.he_uniform(rng, (a, b), a, dt)
            p[f"fc.{i}.b"] = T.zeros_param((b,), dt)
        p["noise.w"] = T.he_uniform(rng, (c.fc[-1], 1), c.fc[-1], dt)
        p["noise.b"] = T.zeros_param((1,), dt)
        p["charge_gate"] = Tensor(np.ones((1,), dtype=dt), requires_grad=True)
        sizes = (c.fc[-1] + 1,) + c.final + (NUM_GROUP_CLASSES,)
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            p[f"final.{i}.w"] = T.he_uniform(rng, (a, b), a, dt)
            p[f"final.{i}.b"] = T.zeros_param((b,), dt)
        self.params = p

    def auc_bucket(self, auc: np.ndarray) -> np.ndarray:
        lo, hi = self.config.auc_log10_range
        n = self.config.auc_buckets
        la = np.log10(np.maximum(auc, 1e-300))
        b = 1 + np.floor((la - lo) / (hi - lo) * (n - 1)).astype(np.int64)
        return np.where(auc > 0, np.clip(b, 1, n - 1), 0)

    def stack(self, samples) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        frames = np.stack([[f.grid for f in s.frames] for s in samples])
        aucs = np.array([[f.auc for f in s.frames] for s in samples])
        charges = np.array([s.charge for s in samples], dtype=np.float64)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return frames, aucs, charges, labels

    def _dense(self, prefix, x, n, train, rng, relu_last=True, p_drop=None):
        p_drop = self.config.dropout if p_drop is None else p_drop
        for i in range(n):
            x = T.linear(x, self.params[f"{prefix}.{i}.w"], self.params[f"{prefix}.{i}.b"])
            if relu_last or i < n - 1:
                x = T.relu(x)
                x = T.dropout(x, p_drop, train, rng)
        return x

    def encode_frames(self, frames: np.ndarray, aucs: np.ndarray, train: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        """Per-frame encodings [B, 5, F]; the same weights serve every slot."""
        c, p = self.config, self.params
        b = frames.shape[0]
        x = Tensor((np.log1p(np.maximum(frames, 0)) / np.log(256.0)).astype(c.dtype).reshape(
            b * GROUP_SIZE, 1, FRAME_ROWS, FRAME_COLS))
        x = T.max_pool2d(T.relu(T.conv2d(x, p["conv1.w"], p["conv1.b"], padding=1)), (2, 1))
        x = T.max_pool2d(T.relu(T.conv2d(x, p["conv2.w"], p["conv2.b"], padding=1)), (2, 1))
        x = T.reshape(x, (b * GROUP_SIZE, -1))
        emb = T.embedding_lookup(p["auc_embed"], self.auc_bucket(aucs.reshape(-1)))
        x = self._dense("frame", T.concat([x, emb], axis=-1), len(c.frame_fc), train, rng,
                        p_drop=c.frame_dropout)
        return T.reshape(x, (b, GROUP_SIZE, c.frame_fc[-1]))

    def forward(self, frames: np.ndarray, aucs: np.ndarray, charges: np.ndarray,
                train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Logits [B, 5] for frames [B, 5, 15, 3], raw AUCs [B, 5] and charges [B]."""
        c, p = self.config, self.params
        b = frames.shape[0]
        dt = np.dtype(c.dtype)
        x = T.reshape(self.encode_frames(frames, aucs, train, rng), (b, 1, GROUP_SIZE, c.frame_fc[-1]))
        x = T.relu(T.conv2d(x, p["combine.w"], p["combine.b"]))  # [B, C, 4, 1]
        x = T.reshape(x, (b, -1))
        h = self._dense("fc", x, len(c.fc), train, rng)
        noise_p = T.sigmoid(T.linear(h, p["noise.w"], p["noise.b"]))  # [B, 1]
        charge = Tensor((charges / 9.0).astype(dt).reshape(b, 1))
        scaled = T.scalar_gate(T.mul(noise_p, charge), p["charge_gate"])
        h = T.concat([h, scaled], axis=-1)
        return self._dense("final", h, len(c.final) + 1, train, rng, relu_last=False)

    def load(self, arrays) -> None:
        for k, p in self.params.items():
            if k not in arrays or arrays[k].shape != p.data.shape:
                raise ValueError(f"checkpoint does not match network at {k!r}")
            p.data = np.array(arrays[k], dtype=p.data.dtype)


def _pad_frames(isos: Sequence[Isotope]) -> list[Frame]:
    frames = [i.frame for i in isos[:GROUP_SIZE]]
    return frames + [blank_frame() for _ in range(GROUP_SIZE - len(frames))]


def classify_group(net: IsoGroupingNet, frames: Sequence[Frame], charge: int) -> tuple[int, np.ndarray]:
    if len(frames) != GROUP_SIZE:
        raise ValueError(f"classify_group needs exactly {GROUP_SIZE} frames")
    grid = np.stack([f.grid for f in frames])[None]
    aucs = np.array([[f.auc for f in frames]])
    with no_grad():
        logits = net.forward(grid, aucs, np.array([charge], dtype=float), train=False)
        probs = T.softmax(logits, axis=-1).data[0]
    return int(np.argmax(probs)), probs


Classifier = Callable[[list[Frame], int], int]


def net_classifier(net: IsoGroupingNet) -> Classifier:
    return lambda frames, charge: classify_group(net, frames, charge)[0]


def scan_cluster(cluster: IsotopeCluster, classify: Classifier, m: LcmsMap) -> list[PeptideFeature]:
    """Rounds of five frames over the cluster.

    Class 0 advances one isotope; class i in 1..3 emits isotopes [0, i] of the round and
    advances past them; class 4 includes five isotopes and continues from the fifth, which
    opens the next round, extending the feature while rounds keep reporting continuations.
    """
    iso = cluster.isotopes
    n = len(iso)
    out = []
    i = 0
    while i < n:
        cls = classify(_pad_frames(iso[i:i + GROUP_SIZE]), cluster.charge)
        if cls == 0:
            i += 1
            continue
        end = min(i + cls, n - 1)  # last included isotope
        cont = cls
        while cont == GROUP_SIZE - 1 and end < n - 1:
            cont = classify(_pad_frames(iso[end:end + GROUP_SIZE]), cluster.charge)
            end = min(end + cont, n - 1)
        members = iso[i:end + 1]
        if len(members) >= 2:
            out.append(make_feature(members, cluster.charge, m))
            i = end + 1
        else:
            i += 1
    return out


def make_feature(members: Sequence[Isotope], charge: int, m: LcmsMap) -> PeptideFeature:
    isotopes = [(i.mz, float(m.rts[i.scans[0]]), float(m.rts[i.scans[-1]])) for i in members]
    return PeptideFeature(mono_mz=members[0].mz, charge=charge, isotopes=isotopes,
                          peak_rt=float(m.rts[members[0].peak_scan]),
                          intensity_auc=float(sum(i.auc for i in members)))
