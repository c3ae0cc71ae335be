"""The feature-table record and its TSV format."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Iterable

FEATURE_COLUMNS = ["mono_mz", "charge", "num_isotopes", "peak_rt", "isotope_mz",
                   "rt_start", "rt_end", "intensity_auc"]


@dataclass
class PeptideFeature:
    mono_mz: float
    charge: int
    isotopes: list[tuple[float, float, float]]  # (mz, rt_start, rt_end)
    peak_rt: float
    intensity_auc: float

    @property
    def num_isotopes(self) -> int:
        return len(self.isotopes)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_feature_table(features: Iterable[PeptideFeature], stream: IO[str]) -> None:
    w = csv.writer(stream, delimiter="\t", lineterminator="\n")
    w.writerow(FEATURE_COLUMNS)
    for f in features:
        w.writerow([_fmt(f.mono_mz), f.charge, f.num_isotopes, _fmt(f.peak_rt),
                    ";".join(_fmt(i[0]) for i in f.isotopes),
                    ";".join(_fmt(i[1]) for i in f.isotopes),
                    ";".join(_fmt(i[2]) for i in f.isotopes),
                    _fmt(f.intensity_auc)])


def read_feature_table(stream: IO[str]) -> list[PeptideFeature]:
    out = []
    for row in csv.DictReader(stream, delimiter="\t"):
        mzs = [float(x) for x in row["isotope_mz"].split(";")]
        a = [float(x) for x in row["rt_start"].split(";")]
        b = [float(x) for x in row["rt_end"].split(";")]
        out.append(PeptideFeature(float(row["mono_mz"]), int(row["charge"]), list(zip(mzs, a, b)),
                                  float(row["peak_rt"]), float(row["intensity_auc"])))
    return out
