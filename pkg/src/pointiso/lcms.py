"""LC-MS map data model, ``.ms1`` text ingestion, intensity scaling and window slicing."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

MZ_DECIMALS = 4
SURROUND_NAMES = ("left", "right", "below", "above")


class Ms1ParseError(ValueError):
    def __init__(self, lineno: int, line: str, reason: str):
        super().__init__(f"line {lineno}: {reason}: {line.rstrip()!r}")
        self.lineno = lineno


class NoSignalError(ValueError):
    pass


@dataclass(frozen=True)
class Point:
    rt: float
    mz: float
    intensity: float

    def __post_init__(self):
        if self.mz <= 0 or self.intensity < 0 or self.rt < 0:
            raise ValueError(f"invalid point {self}")


class LcmsMap:
    """Immutable store of MS1 scans keyed by scan index.

    Points are held flat, ordered by (scan, mz); ``scan_offsets[i]:scan_offsets[i+1]``
    delimits scan ``i``.  ``intensity_scale`` is the factor applied to raw intensities
    (``None`` for an unscaled map).
    """

    def __init__(self, rts, mzs, intensities, scan_offsets, intensity_scale=None, scan_numbers=None):
        self.rts = _frozen(np.asarray(rts, dtype=np.float64))
        self.mz = _frozen(np.asarray(mzs, dtype=np.float64))
        self.intensity = _frozen(np.asarray(intensities, dtype=np.float64))
        self.scan_offsets = _frozen(np.asarray(scan_offsets, dtype=np.int64))
        self.intensity_scale = intensity_scale
        if scan_numbers is None:
            scan_numbers = np.arange(1, len(self.rts) + 1)
        self.scan_numbers = _frozen(np.asarray(scan_numbers, dtype=np.int64))
        n = len(self.rts)
        if len(self.scan_offsets) != n + 1 or self.scan_offsets[-1] != len(self.mz):
            raise ValueError("scan offsets do not cover the point arrays")
        if n > 1 and np.any(np.diff(self.rts) <= 0):
            raise ValueError("scan retention times must be strictly increasing")
        self.scan_index = _frozen(np.repeat(np.arange(n), np.diff(self.scan_offsets)))

    @classmethod
    def from_scans(cls, scans: Iterable[tuple[float, Iterable[tuple[float, float]]]], **kw) -> "LcmsMap":
        """Build from ``(rt, [(mz, intensity), ...])`` pairs; duplicate m/z within a scan are summed."""
        rts, mzs, ints, offsets = [], [], [], [0]
        for rt, peaks in scans:
            arr = np.asarray(list(peaks), dtype=np.float64).reshape(-1, 2)
            mz, inten = _merge_sorted(arr[:, 0], arr[:, 1])
            rts.append(rt)
            mzs.append(mz)
            ints.append(inten)
            offsets.append(offsets[-1] + len(mz))
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
        return cls(rts, cat(mzs), cat(ints), offsets, **kw)

    @property
    def num_scans(self) -> int:
        return len(self.rts)

    @property
    def num_points(self) -> int:
        return len(self.mz)

    @property
    def mz_min(self) -> float:
        return float(self.mz.min()) if self.num_points else 0.0

    @property
    def mz_max(self) -> float:
        return float(self.mz.max()) if self.num_points else 0.0

    @property
    def raw_intensity(self) -> np.ndarray:
        if self.intensity_scale is None:
            return self.intensity
        return self.intensity / self.intensity_scale

    def scan(self, i: int) -> tuple[float, np.ndarray, np.ndarray]:
        lo, hi = self.scan_offsets[i], self.scan_offsets[i + 1]
        return float(self.rts[i]), self.mz[lo:hi], self.intensity[lo:hi]

    def points(self) -> list[Point]:
        return [Point(float(self.rts[s]), float(m), float(i))
                for s, m, i in zip(self.scan_index, self.mz, self.intensity)]

    def select(self, scan_lo: int, scan_hi: int, mz_lo: float, mz_hi: float) -> np.ndarray:
        """Flat indices of points with scan in [scan_lo, scan_hi) and mz in [mz_lo, mz_hi)."""
        scan_lo, scan_hi = max(scan_lo, 0), min(scan_hi, self.num_scans)
        out = []
        for s in range(scan_lo, scan_hi):
            lo, hi = self.scan_offsets[s], self.scan_offsets[s + 1]
            a = lo + np.searchsorted(self.mz[lo:hi], mz_lo, side="left")
            b = lo + np.searchsorted(self.mz[lo:hi], mz_hi, side="left")
            if b > a:
                out.append(np.arange(a, b))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def scan_at_rt(self, rt: float) -> int:
        """Index of the scan nearest to ``rt``."""
        i = int(np.searchsorted(self.rts, rt))
        if i <= 0:
            return 0
        if i >= self.num_scans:
            return self.num_scans - 1
        return i if self.rts[i] - rt < rt - self.rts[i - 1] else i - 1

    def with_intensities(self, intensities: np.ndarray, intensity_scale) -> "LcmsMap":
        return LcmsMap(self.rts, self.mz, intensities, self.scan_offsets,
                       intensity_scale=intensity_scale, scan_numbers=self.scan_numbers)

    def __repr__(self):
        return f"LcmsMap(scans={self.num_scans}, points={self.num_points})"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _merge_sorted(mz: np.ndarray, inten: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(mz, kind="stable")
    mz, inten = mz[order], inten[order]
    if len(mz) > 1 and np.any(np.diff(mz) == 0):
        uniq, inv = np.unique(mz, return_inverse=True)
        summed = np.zeros(len(uniq))
        np.add.at(summed, inv, inten)
        return uniq, summed
    return mz, inten


# -- .ms1 text format ---------------------------------------------------------------

def parse_ms1(stream: IO[str] | Iterable[str]) -> LcmsMap:
    scans: list[tuple[float, list]] = []
    numbers: list[int] = []
    cur = None
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text[0] in "HZD":
            continue
        tok = text.split()
        if tok[0] == "S":
            if len(tok) < 3:
                raise Ms1ParseError(lineno, line, "malformed scan header")
            try:
                numbers.append(int(tok[1]))
            except ValueError:
                raise Ms1ParseError(lineno, line, "non-integer scan number") from None
            cur = [None, []]
            scans.append(cur)
        elif tok[0] == "I":
            if cur is None:
                raise Ms1ParseError(lineno, line, "info line before any scan header")
            if len(tok) >= 3 and tok[1] == "RTime":
                try:
                    cur[0] = float(tok[2])
                except ValueError:
                    raise Ms1ParseError(lineno, line, "non-numeric retention time") from None
        else:
            if cur is None:
                raise Ms1ParseError(lineno, line, "peak line before any scan header")
            if len(tok) < 2:
                raise Ms1ParseError(lineno, line, "peak line needs m/z and intensity")
            try:
                mz, inten = float(tok[0]), float(tok[1])
            except ValueError:
                raise Ms1ParseError(lineno, line, "non-numeric peak line") from None
            cur[1].append((mz, inten))
    for s in scans:
        if s[0] is None:
            raise Ms1ParseError(0, "", "scan without 'I RTime' line")
    return LcmsMap.from_scans([(rt, peaks) for rt, peaks in scans], scan_numbers=numbers or None)


def write_ms1(m: LcmsMap, stream: IO[str]) -> None:
    stream.write("H\tCreationDate\tpointiso\n")
    for i in range(m.num_scans):
        rt, mz, inten = m.scan(i)
        n = int(m.scan_numbers[i])
        stream.write(f"S\t{n:06d}\t{n:06d}\n")
        stream.write(f"I\tRTime\t{float(rt)!r}\n")
        for a, b in zip(mz.tolist(), m.raw_intensity[m.scan_offsets[i]:m.scan_offsets[i + 1]].tolist()):
            stream.write(f"{a!r} {b!r}\n")


def read_ms1_file(path) -> LcmsMap:
    with open(path, encoding="utf-8") as fh:
        return parse_ms1(fh)


def write_ms1_file(m: LcmsMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_ms1(m, fh)


def scale_intensities(m: LcmsMap) -> LcmsMap:
    """Linearly map raw intensities onto [0, 255]; the factor is kept on the result."""
    raw = m.raw_intensity
    top = float(raw.max()) if len(raw) else 0.0
    if top <= 0:
        raise NoSignalError("no signal: every intensity is zero")
    # divide first so the maximum lands on 255 exactly and nothing exceeds it
    return m.with_intensities(raw / top * 255.0, 255.0 / top)


# -- windows ------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowGeometry:
    mz_span: float = 2.0
    rt_scans: int = 15
    max_points: int = 512

    def __post_init__(self):
        if self.mz_span <= 0 or self.rt_scans < 1 or self.max_points < 1:
            raise ValueError(f"invalid window geometry {self}")


@dataclass
class Region:
    """A padded point set: ``points`` is [N x 3] (rt-offset, mz-offset, intensity)."""
    points: np.ndarray
    mask: np.ndarray
    index: np.ndarray  # flat map index per row, -1 for padding

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass
class ScanWindow:
    origin: tuple[int, float]
    target: Region
    surrounds: dict[str, Region]
    labels: np.ndarray | None = None
    weights: np.ndarray | None = None
    kind: str = ""

    def surround_list(self) -> list[Region]:
        return [self.surrounds[k] for k in SURROUND_NAMES]


def region_offsets(geom: WindowGeometry) -> dict[str, tuple[int, float]]:
    """(scan, mz) offsets of the four surround regions relative to the target origin."""
    return {
        "left": (0, -geom.mz_span),
        "right": (0, geom.mz_span),
        "below": (-geom.rt_scans, 0.0),
        "above": (geom.rt_scans, 0.0),
    }


def cut_region(m: LcmsMap, scan0: int, mz0: float, geom: WindowGeometry,
               ref: tuple[int, float] | None = None) -> Region:
    """Points in [mz0, mz0+span) x [scan0, scan0+rt_scans), coordinates relative to ``ref``."""
    ref_scan, ref_mz = ref if ref is not None else (scan0, mz0)
    n = geom.max_points
    idx = m.select(scan0, scan0 + geom.rt_scans, mz0, round(mz0 + geom.mz_span, 6))
    if len(idx) > n:
        # keep the most intense points, then restore (scan, mz) order
        keep = np.argsort(-m.intensity[idx], kind="stable")[:n]
        idx = np.sort(idx[keep])
    pts = np.zeros((n, 3))
    mask = np.zeros(n, dtype=bool)
    index = np.full(n, -1, dtype=np.int64)
    k = len(idx)
    if k:
        pts[:k, 0] = m.scan_index[idx] - ref_scan
        pts[:k, 1] = np.round(m.mz[idx] - ref_mz, MZ_DECIMALS)
        pts[:k, 2] = m.intensity[idx]
        mask[:k] = True
        index[:k] = idx
    return Region(pts, mask, index)


def cut_window(m: LcmsMap, origin: tuple[int, float], geom: WindowGeometry) -> ScanWindow:
    scan0, mz0 = origin
    target = cut_region(m, scan0, mz0, geom)
    surrounds = {
        # each surround in its own frame, so a tile's point features can be reused as a neighbour
        name: cut_region(m, scan0 + ds, round(mz0 + dmz, 6), geom)
        for name, (ds, dmz) in region_offsets(geom).items()
    }
    return ScanWindow(origin=(scan0, mz0), target=target, surrounds=surrounds)


def tile_origins(m: LcmsMap, geom: WindowGeometry, mz_start: float | None = None,
                 mz_stop: float | None = None) -> list[tuple[int, float]]:
    """Non-overlapping window origins covering the map (or the [mz_start, mz_stop) band)."""
    if m.num_points == 0:
        return []
    lo = np.floor(m.mz_min) if mz_start is None else mz_start
    hi = m.mz_max if mz_stop is None else mz_stop
    n_mz = max(int(np.ceil((hi - lo) / geom.mz_span + 1e-12)), 1)
    if mz_stop is None and lo + n_mz * geom.mz_span <= hi:
        n_mz += 1
    n_rt = int(np.ceil(m.num_scans / geom.rt_scans))
    return [(r * geom.rt_scans, round(float(lo + c * geom.mz_span), 6))
            for r in range(n_rt) for c in range(n_mz)]
