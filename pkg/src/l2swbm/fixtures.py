"""Deterministic synthetic two-lake data set for tests, demos, and experiments.

The generator draws a "true" monthly water balance for an upstream/downstream
lake pair (SUP feeds MHU at the fixed routing fraction), integrates it into
exact water levels, then manufactures the observational record around it:

* one long-record source per component (1950-2014) plus a second, shorter or
  noisier source, 18 component series in all;
* each source carries a fixed seasonal bias (a per-calendar-month offset)
  and iid monthly noise, with magnitudes in the same range as the real
  multi-agency estimates the model family was designed to reconcile,
  including a channel-flow gauge that reads systematically low and only
  starts reporting in late 2008;
* water-level gauges observe the true levels with a small iid error plus an
  integrated drift of the lake-wide reference (datum maintenance, gauge
  network changes, crustal rebound): month-over-month level changes look
  clean while the misfit accumulates over seasons and years.

Everything is a pure function of the seed, so two calls with the same seed
produce byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import (
    ComponentSeries,
    SeriesDecl,
    Span,
    align,
    month_number,
    write_declarations,
    write_series,
)
from .priors import DEFAULT_RULES, FitRules, PriorSpec, fit_all

FULL_START = (1950, 1)  # first month of the long observational record
HISTORY_END = (2004, 12)  # priors are fit on data through this month
ANALYSIS_START = (2005, 1)
ANALYSIS_MONTHS = 120
ROUTING = 0.7  # fraction of upstream channel flow entering the lower lake
LEVEL_NOISE_SD = 6.0  # mm, iid part of the lake-wide monthly level estimate
LEVEL_DRIFT_SD = 6.0  # mm/month, stationary sd of the reference drift rate
LEVEL_DRIFT_RHO = 0.9  # month-to-month correlation of the drift rate
OBS_FLOOR = 0.5  # mm, gauges never report negative precipitation/runoff

# Seasonal true means, mm over the lake surface, January..December.
_MEANS = {
    ("SUP", "P"): [48, 45, 52, 62, 72, 80, 86, 88, 84, 74, 62, 52],
    ("SUP", "E"): [96, 78, 48, 18, 2, -2, 6, 22, 42, 62, 84, 98],
    ("SUP", "R"): [30, 34, 60, 94, 76, 54, 40, 32, 30, 35, 40, 36],
    ("SUP", "Q"): [67, 66, 65, 67, 72, 77, 80, 79, 76, 74, 72, 70],
    ("SUP", "D"): [4.9] * 12,
    ("MHU", "P"): [54, 51, 58, 68, 78, 86, 92, 94, 90, 80, 68, 58],
    ("MHU", "E"): [102, 84, 54, 24, 6, 2, 10, 28, 50, 70, 92, 104],
    ("MHU", "R"): [36, 40, 64, 92, 76, 56, 42, 36, 34, 40, 46, 40],
    ("MHU", "Q"): [116, 115, 114, 116, 119, 123, 125, 125, 123, 121, 119, 118],
    ("MHU", "D"): [-2.0] * 12,
}
# Interannual spread of the truth: gamma shape for P, log-sd for R,
# within-month sd for the normal components.
_P_SHAPE = 7.0
_R_LOG_SD = 0.28
_SPREAD = {"E": 12.0, "Q": 5.0, "D": 0.5}

# Source catalog: (component, source_index, first (y, m), mean offset mm,
# seasonal bias wiggle sd mm, monthly noise sd mm). The second
# channel-flow source starts reporting in November 2008, mirroring a
# late-deployed gauge network; offsets echo the systematic disagreements
# between real agency estimates (second precipitation source reads high,
# second flow source low, the downstream diversion source high by ~4 mm).
_SOURCES = {
    "SUP": [
        ("P", 1, FULL_START, -0.5, 3.5, 4.5),
        ("P", 2, ANALYSIS_START, 9.3, 3.5, 6.0),
        ("E", 1, FULL_START, 0.0, 3.5, 4.0),
        ("E", 2, ANALYSIS_START, 2.9, 3.5, 5.0),
        ("R", 1, FULL_START, 1.0, 3.5, 4.0),
        ("R", 2, FULL_START, 4.7, 3.5, 7.0),
        ("Q", 1, FULL_START, -2.3, 1.5, 1.5),
        ("Q", 2, (2008, 11), -13.9, 2.5, 2.5),
        ("D", 1, FULL_START, 0.0, 0.3, 0.4),
    ],
    "MHU": [
        ("P", 1, FULL_START, -2.9, 3.5, 4.5),
        ("P", 2, ANALYSIS_START, 8.0, 3.5, 6.0),
        ("E", 1, FULL_START, -9.5, 3.5, 4.0),
        ("E", 2, ANALYSIS_START, 11.0, 3.5, 5.0),
        ("R", 1, FULL_START, 10.5, 3.5, 4.0),
        ("R", 2, FULL_START, 12.1, 3.5, 7.0),
        ("Q", 1, FULL_START, 0.7, 1.5, 1.5),
        ("Q", 2, (2008, 11), -6.9, 2.5, 2.5),
        ("D", 1, FULL_START, 4.1, 0.3, 0.4),
    ],
}
_LEVEL_START = {"SUP": 183_400.0, "MHU": 176_300.0}


@dataclass
class Fixture:
    """A generated data set plus the truth it was generated from."""

    seed: int
    span: Span  # the 2005-2014 analysis span
    lakes: tuple[str, ...]
    history: list[ComponentSeries]  # long-record sources through 2004, for priors
    series: list[ComponentSeries]  # the full observational record
    truth: dict[tuple[str, str], np.ndarray]  # (lake, comp) -> true monthly values
    true_balance: dict[str, np.ndarray]  # lake -> true monthly balance
    true_levels: dict[str, np.ndarray]  # lake -> exact levels, span + 1 entries
    biases: dict[tuple[str, str, int], np.ndarray] = field(default_factory=dict)

    def table(self):
        return align(self.series, self.span, list(self.lakes))

    def fit_priors(self, rules: FitRules = DEFAULT_RULES) -> PriorSpec:
        spec = fit_all(self.history, rules)
        spec.history_note = f"synthetic fixture seed={self.seed}, 1950-2004"
        return spec

    def write(self, root) -> None:
        """Emit ``history/`` and ``data/`` directories of CSVs + catalogs."""
        root = Path(root)
        for sub, items in (("history", self.history), ("data", self.series)):
            decls = []
            for s in items:
                fname = f"{s.lake}_{s.component}{s.source_index}.csv"
                write_series(root / sub / fname, s)
                decls.append(
                    SeriesDecl(
                        lake=s.lake,
                        component=s.component,
                        source_index=s.source_index,
                        path=fname,
                    )
                )
            write_declarations(root / sub / "declarations.json", decls)
        lines = ["lake,component,year,month,value"]
        for (lake, comp), vals in sorted(self.truth.items()):
            for t, v in enumerate(vals):
                y, m = self.span.year_month_of(t)
                lines.append(f"{lake},{comp},{y},{m},{v!r}")
        (root / "truth.csv").write_text("\n".join(lines) + "\n")


def _truth_for(rng: np.random.Generator, lake: str, comp: str, cal: np.ndarray):
    means = np.asarray(_MEANS[(lake, comp)], dtype=float)[cal]
    if comp == "P":
        return rng.gamma(_P_SHAPE, means / _P_SHAPE)
    if comp == "R":
        # log-normal with exact mean `means`
        mu = np.log(means) - 0.5 * _R_LOG_SD**2
        return np.exp(mu + _R_LOG_SD * rng.standard_normal(len(cal)))
    return means + _SPREAD[comp] * rng.standard_normal(len(cal))


def generate(seed: int = 11) -> Fixture:
    """Build the full synthetic record; every value is a function of ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    lakes = ("SUP", "MHU")
    full_start = month_number(*FULL_START)
    n_full = month_number(2014, 12) - full_start + 1  # 780 months
    cal = (full_start + np.arange(n_full)) % 12  # 0 == January
    span = Span(*ANALYSIS_START, ANALYSIS_MONTHS)
    a0 = span.start - full_start  # offset of the analysis span

    truth_full: dict[tuple[str, str], np.ndarray] = {}
    for lake in lakes:
        for comp in ("P", "E", "R", "Q", "D"):
            truth_full[(lake, comp)] = _truth_for(rng, lake, comp, cal)

    balance_full: dict[str, np.ndarray] = {}
    levels_full: dict[str, np.ndarray] = {}
    for li, lake in enumerate(lakes):
        b = (
            truth_full[(lake, "P")]
            - truth_full[(lake, "E")]
            + truth_full[(lake, "R")]
            - truth_full[(lake, "Q")]
            + truth_full[(lake, "D")]
        )
        if li > 0:
            b = b + ROUTING * truth_full[(lakes[li - 1], "Q")]
        balance_full[lake] = b
        levels_full[lake] = np.concatenate(
            [[_LEVEL_START[lake]], _LEVEL_START[lake] + np.cumsum(b)]
        )

    history: list[ComponentSeries] = []
    series: list[ComponentSeries] = []
    biases: dict[tuple[str, str, int], np.ndarray] = {}
    n_hist = month_number(*HISTORY_END) - full_start + 1  # 660 months

    for lake in lakes:
        for comp, si, first, offset, wiggle, noise in _SOURCES[lake]:
            bias = offset + wiggle * rng.standard_normal(12)
            biases[(lake, comp, si)] = bias
            lo = month_number(*first) - full_start
            vals = (
                truth_full[(lake, comp)][lo:]
                + bias[cal[lo:]]
                + noise * rng.standard_normal(n_full - lo)
            )
            if comp in ("P", "R"):
                vals = np.maximum(vals, OBS_FLOOR)
            mask = np.ones(n_full - lo, dtype=bool)
            series.append(
                ComponentSeries(lake, comp, si, first[0], first[1], vals, mask)
            )
            if lo == 0 and si == 1:
                history.append(
                    ComponentSeries(
                        lake, comp, 1, *FULL_START, vals[:n_hist], mask[:n_hist]
                    )
                )
        # Level gauge covers the full record plus the trailing month. Its
        # error is iid estimation noise plus an integrated slow drift of the
        # lake-wide reference (rebound, thermal cycles, datum maintenance):
        # the drift *rate* is a persistent AR(1), so consecutive monthly
        # differences look clean while the level reference creeps over
        # seasons and years.
        true_levels = levels_full[lake]
        n_lev = len(true_levels)
        shocks = rng.standard_normal(n_lev)
        rate = np.empty(n_lev)
        rate[0] = LEVEL_DRIFT_SD * shocks[0]
        innov_sd = LEVEL_DRIFT_SD * np.sqrt(1.0 - LEVEL_DRIFT_RHO**2)
        for k in range(1, n_lev):
            rate[k] = LEVEL_DRIFT_RHO * rate[k - 1] + innov_sd * shocks[k]
        wander = np.cumsum(rate)
        obs_levels = (
            true_levels + wander + LEVEL_NOISE_SD * rng.standard_normal(n_lev)
        )
        series.append(
            ComponentSeries(
                lake, "H", 1, *FULL_START, obs_levels, np.ones(n_full + 1, bool)
            )
        )

    truth = {k: v[a0 : a0 + ANALYSIS_MONTHS] for k, v in truth_full.items()}
    true_balance = {
        lake: balance_full[lake][a0 : a0 + ANALYSIS_MONTHS] for lake in lakes
    }
    true_levels = {
        lake: levels_full[lake][a0 : a0 + ANALYSIS_MONTHS + 1] for lake in lakes
    }
    return Fixture(
        seed=seed,
        span=span,
        lakes=lakes,
        history=history,
        series=series,
        truth=truth,
        true_balance=true_balance,
        true_levels=true_levels,
        biases=biases,
    )
