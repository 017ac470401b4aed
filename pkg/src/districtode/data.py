"""Indicator panels: CSV ingestion and export, year normalization, and a
synthetic logistic-growth generator.

CSV layout (UTF-8, header required, row order free)::

    district,year,toilet,piped_water,lpg,pucca_house,electricity,education_secondary

One row per (district, year); values are proportions in [0, 1]; an empty
field marks a missing observation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .reference import DISTRICTS, INDICATORS

COLUMNS = ("district", "year") + INDICATORS
SURVEY_YEARS = (2007.0, 2015.0, 2020.0)


class PanelError(ValueError):
    """Invalid panel file or panel contents."""


@dataclass(frozen=True)
class TimeScale:
    year0: float = 2007.0
    year1: float = 2020.0

    def __post_init__(self):
        if not self.year1 > self.year0:
            raise ValueError("year1 must exceed year0")

    @property
    def span(self) -> float:
        return self.year1 - self.year0


def normalize_year(ts: TimeScale, year: float) -> float:
    return (year - ts.year0) / ts.span


def denormalize_year(ts: TimeScale, t: float) -> float:
    return ts.year0 + ts.span * t


@dataclass(frozen=True, eq=False)
class IndicatorPanel:
    values: np.ndarray  # (districts, times, indicators); 0.0 where masked
    mask: np.ndarray  # True where observed
    years: tuple[float, ...]
    district_names: tuple[str, ...]
    indicator_names: tuple[str, ...] = INDICATORS

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "values", np.where(mask, values, 0.0))
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "years", tuple(float(y) for y in self.years))
        object.__setattr__(self, "district_names", tuple(self.district_names))
        object.__setattr__(self, "indicator_names", tuple(self.indicator_names))
        nd, nt, ni = len(self.district_names), len(self.years), len(self.indicator_names)
        if values.shape != (nd, nt, ni) or mask.shape != values.shape:
            raise PanelError(f"values/mask shape {values.shape} != {(nd, nt, ni)}")
        if any(b <= a for a, b in zip(self.years, self.years[1:])):
            raise PanelError("years must be strictly increasing")
        if len(set(self.district_names)) != nd:
            raise PanelError("duplicate district names")
        obs = values[mask]
        if not np.all(np.isfinite(obs)) or np.any(obs < 0.0) or np.any(obs > 1.0):
            raise PanelError("observed values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def times(self, ts: TimeScale = TimeScale()) -> list[float]:
        return [normalize_year(ts, y) for y in self.years]

    def __eq__(self, other) -> bool:
        if not isinstance(other, IndicatorPanel):
            return NotImplemented
        return (
            self.years == other.years
            and self.district_names == other.district_names
            and self.indicator_names == other.indicator_names
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values)
        )


def _fmt_year(y: float) -> str:
    return str(int(y)) if float(y).is_integer() else repr(float(y))


def load_panel(path) -> IndicatorPanel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise PanelError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if sorted(header) != sorted(COLUMNS):
            raise PanelError(f"{path}:1: header must contain exactly {','.join(COLUMNS)}")
        col = {name: header.index(name) for name in COLUMNS}
        cells: dict[tuple[str, float], list[float | None]] = {}
        districts: list[str] = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            name = row[col["district"]].strip()
            if not name:
                raise PanelError(f"{path}:{line}: empty district name")
            try:
                year = float(row[col["year"]])
            except ValueError:
                raise PanelError(f"{path}:{line}: bad year {row[col['year']]!r}") from None
            if not math.isfinite(year):
                raise PanelError(f"{path}:{line}: bad year {row[col['year']]!r}")
            if (name, year) in cells:
                raise PanelError(f"{path}:{line}: duplicate row for ({name}, {_fmt_year(year)})")
            vals: list[float | None] = []
            for ind in INDICATORS:
                raw = row[col[ind]].strip()
                if raw == "":
                    vals.append(None)
                    continue
                try:
                    v = float(raw)
                except ValueError:
                    raise PanelError(f"{path}:{line}: column {ind}: not a number {raw!r}") from None
                if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                    raise PanelError(f"{path}:{line}: column {ind}: value {raw} outside [0, 1]")
                vals.append(v)
            if name not in districts:
                districts.append(name)
            cells[(name, year)] = vals
    if not cells:
        raise PanelError(f"{path}: no data rows")
    years = sorted({y for _, y in cells})
    values = np.zeros((len(districts), len(years), len(INDICATORS)))
    mask = np.zeros(values.shape, dtype=bool)
    d_idx = {d: i for i, d in enumerate(districts)}
    y_idx = {y: j for j, y in enumerate(years)}
    for (name, year), vals in cells.items():
        for k, v in enumerate(vals):
            if v is not None:
                values[d_idx[name], y_idx[year], k] = v
                mask[d_idx[name], y_idx[year], k] = True
    return IndicatorPanel(values, mask, tuple(years), tuple(districts))


def write_panel(panel: IndicatorPanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i, name in enumerate(panel.district_names):
            for j, year in enumerate(panel.years):
                row = [name, _fmt_year(year)]
                for k in range(len(panel.indicator_names)):
                    row.append(repr(float(panel.values[i, j, k])) if panel.mask[i, j, k] else "")
                w.writerow(row)


# base logit in 2007 and logit growth per unit normalized time, per indicator
_BASE_LOGIT = np.array([-1.6, -2.0, -2.6, -1.0, 0.6, -1.8])
_GROWTH = np.array([2.6, 1.4, 2.6, 2.2, 3.4, 0.7])


def synthetic_panel(n_districts: int = 30, years: Sequence[float] = SURVEY_YEARS, seed: int = 0,
                    noise_std: float = 0.005, missing_frac: float = 0.0,
                    ts: TimeScale = TimeScale()) -> IndicatorPanel:
    """Logistic-growth panel with district-specific levels and growth rates.

    Each cell follows ``sigmoid(base_dk + rate_dk * t)`` in normalized time;
    districts differ by a shared development level, a growth multiplier
    and small per-indicator jitter. Gaussian noise is added and clipped.
    """
    rng = np.random.default_rng(seed)
    if n_districts <= len(DISTRICTS):
        names = DISTRICTS[:n_districts]
    else:
        names = tuple(f"district_{i:03d}" for i in range(n_districts))
    t = np.array([normalize_year(ts, y) for y in years])
    level = rng.normal(0.0, 1.0, size=(n_districts, 1))
    speed = np.exp(0.25 * rng.normal(0.0, 1.0, size=(n_districts, 1)))
    jitter = rng.normal(0.0, 0.25, size=(n_districts, len(INDICATORS)))
    base = _BASE_LOGIT + 0.5 * level + jitter
    rate = _GROWTH * speed
    logits = base[:, None, :] + rate[:, None, :] * t[None, :, None]
    values = 1.0 / (1.0 + np.exp(-logits))
    values = np.clip(values + rng.normal(0.0, noise_std, size=values.shape), 0.0, 1.0)
    mask = rng.random(values.shape) >= missing_frac
    return IndicatorPanel(values, mask, tuple(float(y) for y in years), names)
