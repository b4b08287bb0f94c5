"""Data ingest: monthly series I/O, level differencing, and span alignment.

Everything downstream works on rectangular, mask-aware arrays aligned to a
single analysis span. This module owns the month arithmetic, the CSV format
(``year,month,value`` with blank values meaning "missing"), and the
construction of water-level-change observations from a level series.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "IngestError",
    "ParseError",
    "DuplicateKeyError",
    "UnitsError",
    "SpanError",
    "Span",
    "SeriesDecl",
    "ComponentSeries",
    "DeltaHObservations",
    "AlignedSource",
    "AlignedTable",
    "CUMULATIVE",
    "load_series",
    "write_series",
    "write_declarations",
    "read_declarations",
    "load_catalog",
    "delta_h",
    "align",
]

#: Sentinel window value selecting the cumulative (since-start) differencing mode.
CUMULATIVE = "cumulative"


class IngestError(Exception):
    """Base class for data-ingest failures."""


class ParseError(IngestError):
    """A series file is malformed; carries the offending 1-based row number."""

    def __init__(self, path, row, message):
        super().__init__(f"{path}:{row}: {message}")
        self.path = str(path)
        self.row = row


class DuplicateKeyError(IngestError):
    """The same (year, month) appears twice in one series file."""


class UnitsError(IngestError):
    """A series declares units other than millimetres over the lake surface."""


class SpanError(IngestError):
    """A series does not cover the span an operation requires."""


def month_number(year: int, month: int) -> int:
    """Serial month index (year 0, January == 0). Month is 1..12."""
    if not 1 <= month <= 12:
        raise ValueError(f"month must be in 1..12, got {month}")
    return year * 12 + (month - 1)


def year_month(serial: int) -> tuple[int, int]:
    """Inverse of :func:`month_number`."""
    return serial // 12, serial % 12 + 1


@dataclass(frozen=True)
class Span:
    """A contiguous run of ``months`` calendar months starting at (year, month)."""

    start_year: int
    start_month: int
    months: int

    def __post_init__(self):
        if not 1 <= self.start_month <= 12:
            raise ValueError(f"start_month must be in 1..12, got {self.start_month}")
        if self.months < 1:
            raise ValueError(f"span must cover at least one month, got {self.months}")

    @property
    def start(self) -> int:
        return month_number(self.start_year, self.start_month)

    @property
    def end(self) -> int:
        """Serial month one past the last month of the span."""
        return self.start + self.months

    def index_of(self, year: int, month: int) -> int:
        """0-based offset of (year, month) inside the span, or -1 if outside."""
        t = month_number(year, month) - self.start
        return t if 0 <= t < self.months else -1

    def year_month_of(self, t: int) -> tuple[int, int]:
        return year_month(self.start + t)

    def calendar_months(self, extra: int = 0) -> np.ndarray:
        """Calendar month (1..12) for each offset 0..months-1 (+``extra``)."""
        serial = self.start + np.arange(self.months + extra)
        return serial % 12 + 1

    def __str__(self):
        y0, m0 = self.start_year, self.start_month
        y1, m1 = year_month(self.end - 1)
        return f"{y0:04d}-{m0:02d}..{y1:04d}-{m1:02d}"


@dataclass(frozen=True)
class SeriesDecl:
    """Declaration of one observation series: where it lives and what it claims to be.

    ``component`` is one of P, E, R, Q, D (monthly fluxes, mm over the lake
    surface) or H (beginning-of-month water level, mm). ``source_index`` is the
    1-based index distinguishing independent estimates of the same component.
    """

    lake: str
    component: str
    source_index: int
    path: str
    units: str = "mm"

    def __post_init__(self):
        if self.component not in ("P", "E", "R", "Q", "D", "H"):
            raise ValueError(f"unknown component {self.component!r}")
        if self.source_index < 1:
            raise ValueError("source_index is 1-based")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.lake, self.component, self.source_index)

    @property
    def name(self) -> str:
        return f"{self.component}_{self.lake}_{self.source_index}"


@dataclass
class ComponentSeries:
    """One monthly series with an explicit missing-value mask.

    ``values`` is float64 with NaN at masked positions; ``mask`` is True where
    a value is present. The two are kept consistent by construction.
    """

    lake: str
    component: str
    source_index: int
    start_year: int
    start_month: int
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 1:
            raise ValueError("values and mask must be equal-length 1-D arrays")
        # NaN outside the mask, never inside it.
        bad = self.mask & ~np.isfinite(self.values)
        if bad.any():
            raise ValueError("non-finite value at an unmasked position")
        self.values = np.where(self.mask, self.values, np.nan)

    @property
    def start(self) -> int:
        return month_number(self.start_year, self.start_month)

    def __len__(self):
        return len(self.values)

    def window(self, start_serial: int, months: int) -> tuple[np.ndarray, np.ndarray]:
        """(values, mask) for an arbitrary serial-month window, padding with masked."""
        out = np.full(months, np.nan)
        msk = np.zeros(months, dtype=bool)
        lo = max(start_serial, self.start)
        hi = min(start_serial + months, self.start + len(self.values))
        if lo < hi:
            src = slice(lo - self.start, hi - self.start)
            dst = slice(lo - start_serial, hi - start_serial)
            out[dst] = self.values[src]
            msk[dst] = self.mask[src]
        out[~msk] = np.nan
        return out, msk


@dataclass
class DeltaHObservations:
    """Observed water-level changes for one lake and one window length.

    ``window`` is a positive integer (rolling) or :data:`CUMULATIVE`. Rolling
    entry j (0-based) is level(start+j+window) - level(start+j); cumulative
    entry t is level(start+t+1) - level(start). Masked where either endpoint
    level is missing.
    """

    lake: str
    window: int | str
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.values = np.where(self.mask, self.values, np.nan)

    def __len__(self):
        return len(self.values)


@dataclass
class AlignedSource:
    """One observation series cut to the analysis span (length T)."""

    lake: str
    component: str
    source_index: int
    values: np.ndarray
    mask: np.ndarray

    @property
    def name(self) -> str:
        return f"{self.component}_{self.lake}_{self.source_index}"


@dataclass
class AlignedTable:
    """Rectangular mask-aware observation table over one analysis span.

    ``sources`` holds the flux components (P/E/R/Q/D), each of length T.
    ``levels`` maps lake -> (values, mask) arrays of length T+1: the analysis
    months plus the trailing month needed to difference the last level change.
    """

    span: Span
    lakes: tuple[str, ...]
    sources: list[AlignedSource] = field(default_factory=list)
    levels: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def sources_for(self, lake: str, component: str) -> list[AlignedSource]:
        return [
            s
            for s in self.sources
            if s.lake == lake and s.component == component
        ]

    def level_series(self, lake: str) -> ComponentSeries:
        values, mask = self.levels[lake]
        y, m = year_month(self.span.start)
        return ComponentSeries(lake, "H", 1, y, m, values, mask)


_HEADER = ("year", "month", "value")


def load_series(path: str | Path, decl: SeriesDecl) -> ComponentSeries:
    """Read one ``year,month,value`` CSV into a gap-filled masked series.

    Blank values (and months absent between the first and last record) become
    masked entries. Rows must be unique per (year, month); units must be mm.
    """
    if decl.units != "mm":
        raise UnitsError(
            f"{decl.name}: units must be 'mm', got {decl.units!r}"
        )
    path = Path(path)
    records: dict[int, float | None] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if tuple(h.strip().lower() for h in header) != _HEADER:
            raise ParseError(path, 1, f"expected header {','.join(_HEADER)!r}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(path, row_no, f"expected 3 fields, got {len(row)}")
            try:
                year = int(row[0])
                month = int(row[1])
            except ValueError:
                raise ParseError(path, row_no, f"bad year/month {row[:2]!r}") from None
            if not 1 <= month <= 12:
                raise ParseError(path, row_no, f"month out of range: {month}")
            raw = row[2].strip()
            if raw:
                try:
                    value = float(raw)
                except ValueError:
                    raise ParseError(path, row_no, f"bad value {raw!r}") from None
                if not np.isfinite(value):
                    raise ParseError(path, row_no, f"non-finite value {raw!r}")
            else:
                value = None
            serial = month_number(year, month)
            if serial in records:
                raise DuplicateKeyError(
                    f"{path}: duplicate entry for {year:04d}-{month:02d}"
                )
            records[serial] = value
    if not records:
        raise ParseError(path, 2, "no data rows")
    lo, hi = min(records), max(records)
    n = hi - lo + 1
    values = np.full(n, np.nan)
    mask = np.zeros(n, dtype=bool)
    for serial, value in records.items():
        if value is not None:
            values[serial - lo] = value
            mask[serial - lo] = True
    y, m = year_month(lo)
    return ComponentSeries(
        decl.lake, decl.component, decl.source_index, y, m, values, mask
    )


def write_series(path: str | Path, series: ComponentSeries) -> None:
    """Write a series in the same CSV format :func:`load_series` reads."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER)
        for t in range(len(series)):
            year, month = year_month(series.start + t)
            if series.mask[t]:
                writer.writerow([year, month, repr(float(series.values[t]))])
            else:
                writer.writerow([year, month, ""])


DECLARATIONS_SCHEMA_VERSION = 1


def write_declarations(path: str | Path, decls: list[SeriesDecl]) -> None:
    """Write a versioned JSON catalog of series declarations.

    ``path`` entries in each declaration are interpreted relative to the
    catalog file's own directory when read back.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": DECLARATIONS_SCHEMA_VERSION,
        "series": [
            {
                "lake": d.lake,
                "component": d.component,
                "source_index": d.source_index,
                "path": d.path,
                "units": d.units,
            }
            for d in decls
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_declarations(path: str | Path) -> list[SeriesDecl]:
    """Read a declarations catalog written by :func:`write_declarations`."""
    path = Path(path)
    doc = json.loads(path.read_text())
    version = doc.get("schema_version")
    if version != DECLARATIONS_SCHEMA_VERSION:
        raise IngestError(
            f"{path}: declarations schema {version!r} unsupported "
            f"(expected {DECLARATIONS_SCHEMA_VERSION})"
        )
    return [
        SeriesDecl(
            lake=row["lake"],
            component=row["component"],
            source_index=int(row["source_index"]),
            path=row["path"],
            units=row.get("units", "mm"),
        )
        for row in doc["series"]
    ]


def load_catalog(path: str | Path) -> list[ComponentSeries]:
    """Load every series a declarations catalog points at.

    Relative series paths resolve against the catalog's directory.
    """
    path = Path(path)
    out = []
    for decl in read_declarations(path):
        p = Path(decl.path)
        if not p.is_absolute():
            p = path.parent / p
        out.append(load_series(p, decl))
    return out


def delta_h(
    levels: ComponentSeries, window: int | str, span: Span
) -> DeltaHObservations:
    """Difference a level series into observed changes over ``span``.

    Rolling windows produce T - window + 1 entries; the cumulative mode
    produces T entries measured from the span's first level. The level series
    must at least nominally cover the span plus one trailing month (masked
    gaps inside that range are tolerated and propagate to the output mask).
    """
    if levels.component != "H":
        raise ValueError(f"delta_h needs a level series, got {levels.component!r}")
    T = span.months
    values, mask = levels.window(span.start, T + 1)
    if not mask.any():
        raise SpanError(
            f"level series for {levels.lake} does not overlap span {span}"
        )
    if window == CUMULATIVE:
        out = values[1:] - values[0]
        out_mask = mask[1:] & mask[0]
        return DeltaHObservations(levels.lake, CUMULATIVE, out, out_mask)
    w = int(window)
    if not 1 <= w <= T:
        raise ValueError(f"window must be in 1..{T}, got {window}")
    out = values[w:] - values[: T - w + 1]
    out_mask = mask[w:] & mask[: T - w + 1]
    return DeltaHObservations(levels.lake, w, out, out_mask)


def align(
    series: list[ComponentSeries],
    span: Span,
    lakes: tuple[str, ...],
) -> AlignedTable:
    """Cut a set of series to a common span, producing the rectangular table.

    Flux series are trimmed/padded to T months; level series to T+1. A series
    with no unmasked overlap is dropped with a warning rather than an error,
    so partial-record sources entering service mid-span survive unharmed.
    """
    table = AlignedTable(span=span, lakes=tuple(lakes))
    seen: set[tuple[str, str, int]] = set()
    for s in series:
        key = (s.lake, s.component, s.source_index)
        if key in seen:
            raise DuplicateKeyError(f"duplicate series {key}")
        seen.add(key)
        if s.lake not in lakes:
            raise IngestError(f"series {key} names unknown lake {s.lake!r}")
        extra = 1 if s.component == "H" else 0
        values, mask = s.window(span.start, span.months + extra)
        if not mask.any():
            warnings.warn(
                f"series {s.component}_{s.lake}_{s.source_index} has no overlap "
                f"with span {span}; dropped",
                stacklevel=2,
            )
            continue
        if s.component == "H":
            table.levels[s.lake] = (values, mask)
        else:
            table.sources.append(
                AlignedSource(s.lake, s.component, s.source_index, values, mask)
            )
    table.sources.sort(key=lambda s: (s.lake, s.component, s.source_index))
    return table
