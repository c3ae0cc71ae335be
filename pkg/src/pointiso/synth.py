"""Synthetic LC-MS maps with planted peptide features, point noise and feature-like decoys."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .lcms import LcmsMap

# Peptide feature counts per charge 1..9 in the benchmark dataset; used as the default charge mix.
CHARGE_COUNTS = (163038, 863050, 428909, 29183, 1503, 653, 179, 236, 233)

# Tabulated per-charge isotope distances (eight values for nine charges).
LISTED_SPACINGS = (1.00, 0.5, 0.33, 0.25, 0.17, 0.14, 0.13, 0.19)

DECOY_KINDS = ("speckle", "trace", "doublet", "shadow")
TRUNCATION = 0.01  # fraction of an isotope's apex below which its elution profile is cut


class InfeasibleDensityError(ValueError):
    pass


def isotope_spacing(charge: int, table: str = "standard") -> float:
    """m/z distance between consecutive isotopes of a feature with the given charge.

    ``table="standard"`` uses the tabulated values where they agree with 1/z (charges 1-4)
    and 1/z beyond; ``table="listed"`` uses the eight tabulated values verbatim for charges
    1-8, including the anomalous last entry.
    """
    if not 1 <= charge <= 9:
        raise ValueError(f"charge must be in 1..9, got {charge}")
    if table == "listed":
        return LISTED_SPACINGS[charge - 1] if charge <= len(LISTED_SPACINGS) else 1.0 / charge
    if table != "standard":
        raise ValueError(f"unknown spacing table {table!r}")
    return LISTED_SPACINGS[charge - 1] if charge <= 4 else 1.0 / charge


def isotope_mzs(mono_mz: float, charge: int, n: int, table: str = "standard") -> list[float]:
    step = isotope_spacing(charge, table)
    return [round(mono_mz + k * step, 4) for k in range(n)]


@dataclass(frozen=True)
class FeatureSpec:
    mono_mz: float
    charge: int
    num_isotopes: int
    peak_rt: float
    rt_sigma: float
    isotope_envelope: tuple[float, ...]
    peak_intensity: float

    def __post_init__(self):
        if self.num_isotopes < 1 or len(self.isotope_envelope) != self.num_isotopes:
            raise ValueError("envelope length must equal num_isotopes (>= 1)")
        if min(self.isotope_envelope) <= 0:
            raise ValueError("envelope values must be positive")
        if self.rt_sigma <= 0 or self.peak_intensity <= 0 or self.mono_mz <= 0:
            raise ValueError(f"invalid feature spec {self}")
        if not 1 <= self.charge <= 9:
            raise ValueError(f"charge must be in 1..9, got {self.charge}")


def geometric_envelope(n: int, ratio: float = 0.7) -> tuple[float, ...]:
    return tuple(ratio ** k for k in range(n))


@dataclass
class PlantedFeature:
    """A ground-truth feature (or decoy) as rendered into the map."""
    kind: str
    charge: int
    isotope_mz: list[float]
    rt_ranges: list[tuple[float, float]]
    peak_rt: float
    auc: float
    spec: FeatureSpec | None = None

    @property
    def mono_mz(self) -> float:
        return self.isotope_mz[0]

    @property
    def num_isotopes(self) -> int:
        return len(self.isotope_mz)


@dataclass
class GroundTruth:
    features: list[PlantedFeature] = field(default_factory=list)
    decoys: list[PlantedFeature] = field(default_factory=list)


class MapBuilder:
    """Mutable accumulator of (scan, mz) -> intensity; overlapping renders add."""

    def __init__(self, rts):
        self.rts = np.asarray(rts, dtype=np.float64)
        self.cells: list[dict[float, float]] = [dict() for _ in self.rts]

    def add(self, scan: int, mz: float, intensity: float) -> None:
        cell = self.cells[scan]
        cell[mz] = cell.get(mz, 0.0) + intensity

    def total(self) -> float:
        return sum(sum(c.values()) for c in self.cells)

    def build(self) -> LcmsMap:
        return LcmsMap.from_scans((rt, sorted(c.items())) for rt, c in zip(self.rts, self.cells))


def elution_profile(spec: FeatureSpec, rts: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per isotope: (scan indices, intensities) of the truncated Gaussian elution profile."""
    g = np.exp(-0.5 * ((rts - spec.peak_rt) / spec.rt_sigma) ** 2)
    keep = np.flatnonzero(g >= TRUNCATION)
    out = []
    for height in spec.isotope_envelope:
        out.append((keep, height * spec.peak_intensity * g[keep]))
    return out


def render_feature(spec: FeatureSpec, builder: MapBuilder, table: str = "standard",
                   mzs: list[float] | None = None) -> list[tuple[float, float]]:
    """Write the feature's isotope traces into ``builder``; returns per-isotope RT ranges."""
    if mzs is None:
        mzs = isotope_mzs(spec.mono_mz, spec.charge, spec.num_isotopes, table)
    ranges = []
    for mz, (scans, values) in zip(mzs, elution_profile(spec, builder.rts)):
        for s, v in zip(scans.tolist(), values.tolist()):
            builder.add(s, mz, v)
        if len(scans):
            ranges.append((float(builder.rts[scans[0]]), float(builder.rts[scans[-1]])))
        else:
            ranges.append((spec.peak_rt, spec.peak_rt))
    return ranges


def feature_auc(spec: FeatureSpec, rts: np.ndarray) -> float:
    """Discrete area of the rendered profile: sum over isotopes and scans of intensity."""
    return float(sum(v.sum() for _, v in elution_profile(spec, rts)))


@dataclass
class SynthConfig:
    mz_range: tuple[float, float] = (400.0, 460.0)
    num_scans: int = 150
    rt_start: float = 10.0
    scan_interval: float = 0.05
    n_features: int = 200
    charge_weights: tuple[float, ...] = CHARGE_COUNTS
    isotopes: tuple[int, int] = (2, 6)
    rt_sigma: tuple[float, float] = (0.06, 0.12)
    log10_peak: tuple[float, float] = (4.3, 6.0)
    envelope_ratio: float = 0.7
    noise_density: float = 2.0  # random points per scan per Th
    log10_noise: tuple[float, float] = (2.5, 3.7)
    n_decoys: int = 20
    decoy_mix: dict[str, float] = field(
        default_factory=lambda: {"speckle": 1.0, "trace": 1.0, "doublet": 1.0, "shadow": 0.0})
    min_separation: float = 0.05  # Th between isotopes of co-eluting features
    spacing_table: str = "standard"
    max_tries: int = 2000
    seed: int = 0

    @property
    def rts(self) -> np.ndarray:
        return np.round(self.rt_start + self.scan_interval * np.arange(self.num_scans), 6)


class _Occupancy:
    """Tracks (mz, rt range) of rendered traces for separation checks."""

    def __init__(self, sep: float):
        self.sep = sep
        self.traces: list[tuple[float, float, float]] = []

    def free(self, mzs, rt_lo, rt_hi, ignore=()) -> bool:
        for j, (m, a, b) in enumerate(self.traces):
            if j in ignore or b < rt_lo or a > rt_hi:
                continue
            if any(abs(m - x) < self.sep for x in mzs):
                return False
        return True

    def add(self, mzs, rt_lo, rt_hi) -> list[int]:
        start = len(self.traces)
        self.traces.extend((m, rt_lo, rt_hi) for m in mzs)
        return list(range(start, len(self.traces)))


def _rt_halfwidth(sigma: float) -> float:
    return sigma * np.sqrt(-2.0 * np.log(TRUNCATION))


def generate_map(config: SynthConfig) -> tuple[LcmsMap, GroundTruth]:
    rng = np.random.default_rng(config.seed)
    rts = config.rts
    builder = MapBuilder(rts)
    truth = GroundTruth()
    occ = _Occupancy(config.min_separation)
    if config.n_features == 0 and config.n_decoys == 0 and config.noise_density == 0:
        return builder.build(), truth
    mz_lo, mz_hi = config.mz_range
    rt_lo, rt_hi = float(rts[0]), float(rts[-1])
    weights = np.asarray(config.charge_weights, dtype=float)
    weights = weights / weights.sum()
    table = config.spacing_table

    def place(n_iso: int, charge: int, sigma: float, spacing_span: float):
        half = _rt_halfwidth(sigma) + config.scan_interval
        lo_mz, hi_mz = mz_lo + 0.5, mz_hi - 0.5 - spacing_span
        lo_rt, hi_rt = rt_lo + half, rt_hi - half
        if hi_mz <= lo_mz or hi_rt <= lo_rt:
            raise InfeasibleDensityError("feature does not fit inside the map extent")
        for _ in range(config.max_tries):
            mono = round(float(rng.uniform(lo_mz, hi_mz)), 4)
            peak = float(rng.uniform(lo_rt, hi_rt))
            yield mono, peak, half

    for _ in range(config.n_features):
        charge = int(rng.choice(9, p=weights)) + 1
        n_iso = int(rng.integers(config.isotopes[0], config.isotopes[1] + 1))
        sigma = float(rng.uniform(*config.rt_sigma))
        height = 10 ** float(rng.uniform(*config.log10_peak))
        span = (n_iso - 1) * isotope_spacing(charge, table)
        for mono, peak, half in place(n_iso, charge, sigma, span):
            mzs = isotope_mzs(mono, charge, n_iso, table)
            if occ.free(mzs, peak - half, peak + half):
                break
        else:
            raise InfeasibleDensityError(
                f"could not place feature {len(truth.features) + 1} of {config.n_features}")
        spec = FeatureSpec(mono, charge, n_iso, peak, sigma,
                           geometric_envelope(n_iso, config.envelope_ratio), height)
        ranges = render_feature(spec, builder, table, mzs)
        occ.add(mzs, peak - half, peak + half)
        truth.features.append(PlantedFeature("feature", charge, mzs, ranges, peak,
                                             feature_auc(spec, rts), spec))

    _plant_decoys(config, rng, builder, truth, occ)
    _plant_noise(config, rng, builder)
    return builder.build(), truth


_BAD_SPACINGS = ((0.38, 0.45), (0.6, 0.9))


def _plant_decoys(config, rng, builder, truth, occ):
    kinds = [k for k in DECOY_KINDS if config.decoy_mix.get(k, 0) > 0]
    if not kinds or config.n_decoys == 0:
        return
    p = np.array([config.decoy_mix[k] for k in kinds], dtype=float)
    p /= p.sum()
    rts = builder.rts
    mz_lo, mz_hi = config.mz_range
    for _ in range(config.n_decoys):
        kind = kinds[int(rng.choice(len(kinds), p=p))]
        for _try in range(config.max_tries):
            sigma = float(rng.uniform(*config.rt_sigma))
            half = _rt_halfwidth(sigma) + config.scan_interval
            peak = float(rng.uniform(rts[0] + half, rts[-1] - half))
            height = 10 ** float(rng.uniform(*config.log10_peak))
            mono = round(float(rng.uniform(mz_lo + 0.5, mz_hi - 1.5)), 4)
            ignore = ()
            if kind == "speckle":
                mzs = [mono]
            elif kind == "trace":
                mzs = [mono]
            elif kind == "doublet":
                a, b = _BAD_SPACINGS[int(rng.integers(len(_BAD_SPACINGS)))]
                mzs = [mono, round(mono + float(rng.uniform(a, b)), 4)]
            else:
                if not truth.features:
                    break
                parent = truth.features[int(rng.integers(len(truth.features)))]
                ps = parent.spec
                sign = 1.0 if rng.random() < 0.5 else -1.0
                shift = sign * float(rng.uniform(0.02, 0.04))
                n = min(parent.num_isotopes, int(rng.integers(2, 4)))
                mzs = [round(m + shift, 4) for m in parent.isotope_mz[:n]]
                sigma, peak = ps.rt_sigma, ps.peak_rt
                half = _rt_halfwidth(sigma) + config.scan_interval
                height = ps.peak_intensity * float(rng.uniform(0.1, 0.3))
                # the shadow sits next to its parent by construction
                ignore = set(i for i, (m, a, b) in enumerate(occ.traces)
                             if any(abs(m - x) < 0.1 for x in parent.isotope_mz) and a <= peak <= b)
            if occ.free(mzs, peak - half, peak + half, ignore=ignore) and mzs[-1] < mz_hi:
                break
        else:
            raise InfeasibleDensityError(f"could not place {kind} decoy")
        if kind == "speckle":
            s0 = int(np.searchsorted(rts, peak))
            n = int(rng.integers(3, 9))
            scans = np.clip(s0 + rng.integers(-2, 3, size=n), 0, len(rts) - 1)
            offs = np.round(rng.uniform(0, 0.05, size=n), 4)
            vals = 10 ** rng.uniform(config.log10_noise[1], config.log10_peak[0], size=n)
            pts = sorted({(int(s), round(mono + float(o), 4)): float(v) for s, o, v in zip(scans, offs, vals)}.items())
            for (s, m), v in pts:
                builder.add(s, m, v)
            d = PlantedFeature("speckle", 0, [mono], [(float(rts[scans.min()]), float(rts[scans.max()]))],
                               float(rts[s0]), float(vals.sum()))
        else:
            env = tuple(1.0 for _ in mzs) if kind != "shadow" else geometric_envelope(len(mzs), config.envelope_ratio)
            if kind == "doublet":
                env = (1.0, float(rng.uniform(0.5, 1.5)))
            spec = FeatureSpec(mzs[0], 1, len(mzs), peak, sigma, env, height)
            ranges = render_feature(spec, builder, mzs=mzs)
            d = PlantedFeature(kind, 0, mzs, ranges, peak, feature_auc(spec, rts), spec)
        occ.add(d.isotope_mz, peak - half, peak + half)
        truth.decoys.append(d)


def _plant_noise(config, rng, builder):
    mz_lo, mz_hi = config.mz_range
    n = int(rng.poisson(config.noise_density * config.num_scans * (mz_hi - mz_lo)))
    if n == 0:
        return
    scans = rng.integers(0, config.num_scans, size=n)
    mzs = np.round(rng.uniform(mz_lo, mz_hi, size=n), 4)
    vals = 10 ** rng.uniform(*config.log10_noise, size=n)
    for s, m, v in zip(scans.tolist(), mzs.tolist(), vals.tolist()):
        builder.add(s, m, v)


# -- labels -------------------------------------------------------------------------

def label_points(m: LcmsMap, truth: GroundTruth, mz_tol: float = 0.00005) -> np.ndarray:
    """Per map point: the charge of the planted feature whose isotope trace it lies on, else 0."""
    labels = np.zeros(m.num_points, dtype=np.int64)
    for f in truth.features:
        for mz, (a, b) in zip(f.isotope_mz, f.rt_ranges):
            s_lo = int(np.searchsorted(m.rts, a - 1e-9))
            s_hi = int(np.searchsorted(m.rts, b + 1e-9, side="right"))
            idx = m.select(s_lo, s_hi, mz - mz_tol, mz + mz_tol + 1e-9)
            labels[idx] = f.charge
    return labels


# -- TSV ----------------------------------------------------------------------------

TRUTH_COLUMNS = ["kind", "mono_mz", "charge", "num_isotopes", "peak_rt",
                 "isotope_mz", "rt_start", "rt_end", "auc"]


def _join(xs) -> str:
    return ";".join(repr(float(x)) for x in xs)


def _split(s: str) -> list[float]:
    return [float(x) for x in s.split(";")] if s else []


def write_truth_tsv(truth: GroundTruth, stream: IO[str]) -> None:
    w = csv.writer(stream, delimiter="\t", lineterminator="\n")
    w.writerow(TRUTH_COLUMNS)
    for f in truth.features + truth.decoys:
        w.writerow([f.kind, repr(f.mono_mz), f.charge, f.num_isotopes, repr(f.peak_rt),
                    _join(f.isotope_mz), _join(a for a, _ in f.rt_ranges),
                    _join(b for _, b in f.rt_ranges), repr(f.auc)])


def read_truth_tsv(stream: IO[str]) -> GroundTruth:
    truth = GroundTruth()
    for row in csv.DictReader(stream, delimiter="\t"):
        f = PlantedFeature(
            kind=row["kind"], charge=int(row["charge"]), isotope_mz=_split(row["isotope_mz"]),
            rt_ranges=list(zip(_split(row["rt_start"]), _split(row["rt_end"]))),
            peak_rt=float(row["peak_rt"]), auc=float(row["auc"]))
        (truth.features if f.kind == "feature" else truth.decoys).append(f)
    return truth
