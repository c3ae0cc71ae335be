"""Feature matching against ground truth, intensity correlation and confusion matrices."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class MatchReport:
    total_truth: int
    matched: int
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (detected index, truth index)
    unmatched_detected: list[int] = field(default_factory=list)
    unmatched_truth: list[int] = field(default_factory=list)

    @property
    def detection_pct(self) -> float:
        return 100.0 * self.matched / self.total_truth if self.total_truth else 0.0

    def false_emission_pct(self, num_detected: int) -> float:
        return 100.0 * len(self.unmatched_detected) / num_detected if num_detected else 0.0


def match_features(detected: Sequence, truth: Sequence, tol_mz: float = 0.01, tol_rt: float = 0.2,
                   require_charge: bool = True) -> MatchReport:
    """Greedy nearest-first one-to-one matching on monoisotope m/z and peak RT.

    Items need ``mono_mz``, ``peak_rt`` and ``charge``.  Distance is the tolerance-normalised
    Euclidean distance; ties break on index order.
    """
    cands = []
    if detected and truth:
        d_mz = np.array([d.mono_mz for d in detected])
        d_rt = np.array([d.peak_rt for d in detected])
        d_z = np.array([d.charge for d in detected])
        for j, t in enumerate(truth):
            dm = np.abs(d_mz - t.mono_mz)
            dr = np.abs(d_rt - t.peak_rt)
            ok = (dm <= tol_mz + 1e-12) & (dr <= tol_rt + 1e-12)
            if require_charge:
                ok &= d_z == t.charge
            for i in np.flatnonzero(ok):
                cands.append((float(np.hypot(dm[i] / tol_mz, dr[i] / tol_rt)), int(i), j))
    cands.sort()
    used_d, used_t, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        pairs.append((i, j))
    pairs.sort()
    return MatchReport(total_truth=len(truth), matched=len(pairs), pairs=pairs,
                       unmatched_detected=[i for i in range(len(detected)) if i not in used_d],
                       unmatched_truth=[j for j in range(len(truth)) if j not in used_t])


def detection_by_charge(report: MatchReport, truth: Sequence, charges: Sequence[int]) -> float:
    """Detection percentage restricted to truth features of the given charges."""
    want = set(charges)
    sel = [j for j, t in enumerate(truth) if t.charge in want]
    if not sel:
        return 0.0
    hit = {j for _, j in report.pairs}
    return 100.0 * sum(j in hit for j in sel) / len(sel)


def overlaps_trace(feature, decoys: Sequence, tol_mz: float = 0.01, tol_rt: float = 0.2) -> bool:
    """True when any isotope of ``feature`` lies on a trace of one of ``decoys``."""
    for mz, a, b in feature.isotopes:
        for d in decoys:
            for dmz, (da, db) in zip(d.isotope_mz, d.rt_ranges):
                if abs(mz - dmz) <= tol_mz and a <= db + tol_rt and b >= da - tol_rt:
                    return True
    return False


def decoy_origin_emissions(detected: Sequence, report: MatchReport, decoys: Sequence,
                           tol_mz: float = 0.01, tol_rt: float = 0.2) -> list[int]:
    """Unmatched emissions that sit on a planted decoy."""
    return [i for i in report.unmatched_detected if overlaps_trace(detected[i], decoys, tol_mz, tol_rt)]


def intensity_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("intensity readings must be two equal-length vectors")
    if len(x) < 2:
        raise ValueError("need at least two pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(dx, dx)), np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise ValueError("zero variance")
    return float(np.dot(dx, dy) / (sx * sy))


def confusion_and_sensitivity(pred: Sequence[int], labels: Sequence[int],
                              num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised confusion matrix (rows = true class) and its diagonal.

    Classes absent from ``labels`` get an all-zero row and NaN sensitivity.
    """
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    for name, v in (("prediction", pred), ("label", labels)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} outside 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes))
    np.add.at(counts, (labels, pred), 1)
    rows = counts.sum(axis=1, keepdims=True)
    mat = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    sens = np.where(rows[:, 0] > 0, np.diag(mat), np.nan)
    return mat, sens
