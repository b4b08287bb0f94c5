"""Informative monthly priors fitted from historical component records.

Each water-balance component gets one prior per calendar month, fitted from
the monthly values of a multi-year history:

* precipitation  -> Gamma, moments via Thom's closed-form estimator,
* runoff         -> log-normal (moments of the log record),
* evaporation, outflow, diversion -> Normal with the sample mean and a
  precision that may be deliberately down-weighted (``precision_scale``).

Down-weighting the precision widens a prior without moving it: the fitted
variance is divided by the scale, so scale 0.5 halves the precision.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import ComponentSeries, month_number

__all__ = [
    "PriorError",
    "DegenerateHistoryError",
    "DomainError",
    "FitRules",
    "PriorCell",
    "PriorSpec",
    "fit_normal",
    "fit_gamma_thom",
    "fit_lognormal",
    "fit_all",
    "DEFAULT_RULES",
]

SCHEMA_VERSION = 1

#: Minimum per-month sample size below which a fit warns about thin history.
THIN_HISTORY = 10


class PriorError(Exception):
    """Base class for prior-fitting failures."""


class DegenerateHistoryError(PriorError):
    """History too short or constant: no finite-precision fit exists."""


class DomainError(PriorError):
    """History violates the support of the requested family."""


def fit_normal(values, precision_scale: float = 1.0) -> tuple[float, float]:
    """Normal prior (mean, precision) from a history sample.

    Precision is ``precision_scale`` divided by the unbiased sample variance;
    a scale below 1 widens the prior, leaving the mean untouched.
    """
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise DegenerateHistoryError(f"need >= 2 values, got {x.size}")
    var = float(np.var(x, ddof=1))
    if var <= 0.0:
        raise DegenerateHistoryError("history is constant; precision undefined")
    if precision_scale <= 0.0:
        raise ValueError(f"precision_scale must be positive, got {precision_scale}")
    return float(np.mean(x)), precision_scale / var


def fit_gamma_thom(values) -> tuple[float, float]:
    """Gamma prior (shape, rate) via Thom's log-moment estimator.

    With m the sample mean and g the mean log, let phi = ln(m) - g; then
    shape = (1 + sqrt(1 + 4*phi/3)) / (4*phi) and rate = shape / m, so the
    fitted prior mean shape/rate reproduces the sample mean exactly.
    """
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise DegenerateHistoryError(f"need >= 2 values, got {x.size}")
    if np.any(x <= 0.0):
        raise DomainError("gamma fit requires strictly positive history")
    m = float(np.mean(x))
    phi = math.log(m) - float(np.mean(np.log(x)))
    if phi <= 0.0:
        # ln(mean) >= mean(ln) with equality only for a constant sample.
        raise DegenerateHistoryError("history is constant; gamma shape undefined")
    shape = (1.0 + math.sqrt(1.0 + 4.0 * phi / 3.0)) / (4.0 * phi)
    rate = shape / m
    return shape, rate


def fit_lognormal(values) -> tuple[float, float]:
    """Log-normal prior (log-mean, log-precision) from a positive history."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise DegenerateHistoryError(f"need >= 2 values, got {x.size}")
    if np.any(x <= 0.0):
        raise DomainError("log-normal fit requires strictly positive history")
    logs = np.log(x)
    var = float(np.var(logs, ddof=1))
    if var <= 0.0:
        raise DegenerateHistoryError("history is constant; log-precision undefined")
    return float(np.mean(logs)), 1.0 / var


@dataclass(frozen=True)
class FitRules:
    """Family and precision-scale assignments used by :func:`fit_all`."""

    families: dict[str, str] = field(
        default_factory=lambda: {
            "P": "gamma",
            "E": "normal",
            "R": "lognormal",
            "Q": "normal",
            "D": "normal",
        }
    )
    precision_scale: dict[str, float] = field(
        default_factory=lambda: {"E": 0.5, "Q": 0.5, "D": 1.0}
    )

    def scale_for(self, component: str) -> float:
        return self.precision_scale.get(component, 1.0)

    @classmethod
    def from_json(cls, path: str | Path) -> "FitRules":
        raw = json.loads(Path(path).read_text())
        base = cls()
        return cls(
            families={**base.families, **raw.get("families", {})},
            precision_scale={**base.precision_scale, **raw.get("precision_scale", {})},
        )


DEFAULT_RULES = FitRules()

_FAMILY_PARAMS = {
    "normal": ("mean", "precision"),
    "gamma": ("shape", "rate"),
    "lognormal": ("log_mean", "log_precision"),
}


@dataclass(frozen=True)
class PriorCell:
    """One per-calendar-month prior: a family tag plus its two parameters."""

    family: str
    params: tuple[float, float]

    def __post_init__(self):
        if self.family not in _FAMILY_PARAMS:
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def mean(self) -> float:
        """Central value used to initialise chains (log-normal: the median)."""
        a, b = self.params
        if self.family == "normal":
            return a
        if self.family == "gamma":
            return a / b
        return math.exp(a)

    def as_dict(self) -> dict:
        names = _FAMILY_PARAMS[self.family]
        return {"family": self.family, **dict(zip(names, self.params))}

    @classmethod
    def from_dict(cls, raw: dict) -> "PriorCell":
        family = raw["family"]
        names = _FAMILY_PARAMS[family]
        return cls(family, (float(raw[names[0]]), float(raw[names[1]])))


@dataclass
class PriorSpec:
    """All fitted priors, keyed by (lake, component, calendar month 1..12)."""

    cells: dict[tuple[str, str, int], PriorCell] = field(default_factory=dict)
    history_note: str = ""

    def get(self, lake: str, component: str, month: int) -> PriorCell | None:
        return self.cells.get((lake, component, month))

    def put(self, lake: str, component: str, month: int, cell: PriorCell) -> None:
        self.cells[(lake, component, month)] = cell

    def lakes(self) -> tuple[str, ...]:
        return tuple(sorted({k[0] for k in self.cells}))

    def to_json(self, path: str | Path | None = None) -> str:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "history_note": self.history_note,
            "cells": [
                {
                    "lake": lake,
                    "component": comp,
                    "month": month,
                    **cell.as_dict(),
                }
                for (lake, comp, month), cell in sorted(self.cells.items())
            ],
        }
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "PriorSpec":
        if isinstance(source, Path) or (
            isinstance(source, str) and not source.lstrip().startswith("{")
        ):
            raw = json.loads(Path(source).read_text())
        else:
            raw = json.loads(source)
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise PriorError(f"unsupported prior schema_version {version!r}")
        spec = cls(history_note=raw.get("history_note", ""))
        for entry in raw["cells"]:
            spec.put(
                entry["lake"],
                entry["component"],
                int(entry["month"]),
                PriorCell.from_dict(entry),
            )
        return spec


def _monthly_partition(series: ComponentSeries) -> dict[int, np.ndarray]:
    """Unmasked values of a history series grouped by calendar month."""
    months = (series.start + np.arange(len(series))) % 12 + 1
    out: dict[int, np.ndarray] = {}
    for m in range(1, 13):
        sel = (months == m) & series.mask
        out[m] = series.values[sel]
    return out


def fit_all(
    histories: list[ComponentSeries],
    rules: FitRules = DEFAULT_RULES,
) -> PriorSpec:
    """Fit every (lake, component, calendar month) prior from history series.

    One history series per (lake, component) is expected; duplicates are an
    error. Months with fewer than 10 historical values trigger a thin-history
    warning but still fit.
    """
    spec = PriorSpec()
    seen: set[tuple[str, str]] = set()
    starts, ends = [], []
    for series in histories:
        key = (series.lake, series.component)
        if series.component not in rules.families:
            raise PriorError(f"no fitting rule for component {series.component!r}")
        if key in seen:
            raise PriorError(f"duplicate history for {key}")
        seen.add(key)
        starts.append(series.start)
        ends.append(series.start + len(series))
        family = rules.families[series.component]
        for month, sample in _monthly_partition(series).items():
            if sample.size < THIN_HISTORY:
                warnings.warn(
                    f"{series.component}_{series.lake} month {month}: only "
                    f"{sample.size} historical values",
                    stacklevel=2,
                )
            try:
                if family == "normal":
                    params = fit_normal(sample, rules.scale_for(series.component))
                elif family == "gamma":
                    params = fit_gamma_thom(sample)
                else:
                    params = fit_lognormal(sample)
            except PriorError as exc:
                raise type(exc)(
                    f"{series.component}_{series.lake} month {month}: {exc}"
                ) from exc
            spec.put(series.lake, series.component, month, PriorCell(family, params))
    if starts:
        from .ingest import year_month

        y0, m0 = year_month(min(starts))
        y1, m1 = year_month(max(ends) - 1)
        spec.history_note = f"fitted from {y0:04d}-{m0:02d}..{y1:04d}-{m1:02d}"
    return spec


def history_span_months(start_year: int, end_year: int) -> tuple[int, int]:
    """Serial bounds (inclusive start, exclusive end) of whole-year history."""
    return month_number(start_year, 1), month_number(end_year, 12) + 1
