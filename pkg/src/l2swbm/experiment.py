"""Factorial experiment harness: build, sample, diagnose, and time a batch
of model variants on shared data, then tabulate them side by side.

Models run sequentially (chains may still run in parallel inside one model);
a failure in one model is recorded and never interrupts the rest. Runtimes
cover sampling only — posterior-predictive work is diagnosed afterwards and
excluded, so timing columns stay comparable when closure is skipped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import closure, dic, psrf
from .ingest import CUMULATIVE, AlignedTable, delta_h
from .network import ModelConfig, Network, build, make_config
from .priors import PriorSpec
from .sampler import SampleStore, SamplerSettings, run

__all__ = [
    "CANONICAL_IDS",
    "ComparisonTable",
    "DesignMatrix",
    "ExperimentError",
    "ExperimentReport",
    "ModelRow",
    "canonical_design",
    "compare",
    "run_design",
]

REPORT_SCHEMA_VERSION = 1
DESIGN_SCHEMA_VERSION = 1

# The factorial grid: the prototype (cumulative balance, no process error,
# fixed bias), then rolling windows of 1 and 12 months crossed with process
# error none/fixed/hier and bias fixed/hier; the whole block repeats with
# the constrained channel-flow bias prior (f prefix).
_BLOCK = ["PROT"] + [
    f"{w:02d}{e}{b}" for w in (1, 12) for e in ("N", "F", "H") for b in ("F", "H")
]
CANONICAL_IDS: tuple[str, ...] = tuple(_BLOCK + ["f" + body for body in _BLOCK])


class ExperimentError(Exception):
    pass


# ---------------------------------------------------------------------------
# Design
# ---------------------------------------------------------------------------


@dataclass
class DesignMatrix:
    """An ordered batch of model configs sharing one sampler protocol.

    ``data_ref``/``priors_ref`` are free-form provenance strings (paths,
    catalog names) carried into the report; the actual data objects are
    passed to :func:`run_design` directly.
    """

    configs: list[ModelConfig]
    settings: SamplerSettings
    data_ref: str | None = None
    priors_ref: str | None = None

    def __post_init__(self):
        ids = [c.id for c in self.configs]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ExperimentError(f"duplicate model ids in design: {dupes}")
        if not ids:
            raise ExperimentError("design has no models")

    def ids(self) -> list[str]:
        return [c.id for c in self.configs]

    def as_dict(self) -> dict:
        return {
            "schema_version": DESIGN_SCHEMA_VERSION,
            "settings": self.settings.as_dict(),
            "data_ref": self.data_ref,
            "priors_ref": self.priors_ref,
            "models": [
                {
                    "id": c.id,
                    "window": c.window,
                    "process_error": c.process_error,
                    "bias": c.bias,
                    "constrained_flow_bias": c.constrained_flow_bias,
                    "lakes": list(c.lakes),
                    "monitored": list(c.monitored),
                }
                for c in self.configs
            ],
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "DesignMatrix":
        raw = source if isinstance(source, str) and source.lstrip().startswith("{") \
            else Path(source).read_text()
        doc = json.loads(raw)
        version = doc.get("schema_version")
        if version != DESIGN_SCHEMA_VERSION:
            raise ExperimentError(f"unsupported design schema_version {version!r}")
        for key in ("settings", "models"):
            if key not in doc:
                raise ExperimentError(f"design document lacks the {key!r} field")
        try:
            settings = SamplerSettings(**doc["settings"])
        except TypeError as exc:
            raise ExperimentError(f"bad sampler settings: {exc}") from None
        configs = []
        for entry in doc["models"]:
            if isinstance(entry, str):
                configs.append(make_config(entry))
                continue
            fields_ = dict(entry)
            fields_["lakes"] = tuple(fields_.get("lakes", ("SUP", "MHU")))
            fields_["monitored"] = tuple(fields_.get("monitored", ("*",)))
            try:
                configs.append(ModelConfig(**fields_))
            except TypeError as exc:
                raise ExperimentError(
                    f"bad model entry {fields_.get('id', entry)!r}: {exc}"
                ) from None
        return cls(
            configs=configs,
            settings=settings,
            data_ref=doc.get("data_ref"),
            priors_ref=doc.get("priors_ref"),
        )


def canonical_design(
    settings: SamplerSettings | None = None, **config_overrides
) -> DesignMatrix:
    """The full 26-variant grid, prototype first, constrained block second."""
    if settings is None:
        settings = SamplerSettings()
    configs = [make_config(mid, **config_overrides) for mid in CANONICAL_IDS]
    return DesignMatrix(configs=configs, settings=settings)


# ---------------------------------------------------------------------------
# Batch execution
# ---------------------------------------------------------------------------


@dataclass
class ModelRow:
    """Everything the report keeps for one model: either the diagnostic
    summaries or a failure reason, never both empty."""

    model_id: str
    window: int | str
    ok: bool
    runtime_seconds: float = 0.0
    chain_seconds: list[float] = field(default_factory=list)
    closure: dict | None = None
    dic: dict | None = None
    convergence: dict | None = None
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "window": self.window,
            "ok": self.ok,
            "runtime_seconds": self.runtime_seconds,
            "chain_seconds": self.chain_seconds,
            "closure": self.closure,
            "dic": self.dic,
            "convergence": self.convergence,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelRow":
        return cls(**raw)


@dataclass
class ExperimentReport:
    """Per-model rows in design order plus the shared protocol echo."""

    rows: list[ModelRow]
    settings: SamplerSettings
    seed: int
    windows: tuple[int, ...] = (1, 12, 60)
    data_ref: str | None = None
    priors_ref: str | None = None
    stores: dict[str, SampleStore] = field(default_factory=dict, repr=False)

    def row(self, model_id: str) -> ModelRow:
        for r in self.rows:
            if r.model_id == model_id:
                return r
        raise ExperimentError(f"model {model_id!r} not in report")

    def ids(self) -> list[str]:
        return [r.model_id for r in self.rows]

    def failures(self) -> list[ModelRow]:
        return [r for r in self.rows if not r.ok]

    # -- serialization -------------------------------------------------------

    def as_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "seed": self.seed,
            "settings": self.settings.as_dict(),
            "windows": list(self.windows),
            "data_ref": self.data_ref,
            "priors_ref": self.priors_ref,
            "models": [r.as_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        version = doc.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise ExperimentError(f"unsupported report schema_version {version!r}")
        return cls(
            rows=[ModelRow.from_dict(r) for r in doc["models"]],
            settings=SamplerSettings(**doc["settings"]),
            seed=doc["seed"],
            windows=tuple(doc["windows"]),
            data_ref=doc.get("data_ref"),
            priors_ref=doc.get("priors_ref"),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write(self, out_dir: str | Path, force: bool = False) -> None:
        """Emit ``report.json`` plus the four cross-model CSV tables."""
        out = Path(out_dir)
        target = out / "report.json"
        if target.exists() and not force:
            raise ExperimentError(f"{target} exists; pass force to overwrite")
        out.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")

        lines = ["model,lake,window,denominator,n_observed,n_inside,percent,note"]
        for r in self.rows:
            for c in (r.closure or {}).get("rows", []):
                pct = "" if c["percent"] is None else repr(c["percent"])
                note = c["note"] or ""
                lines.append(
                    f"{r.model_id},{c['lake']},{c['window']},{c['denominator']},"
                    f"{c['n_observed']},{c['n_inside']},{pct},{note}"
                )
        (out / "closure.csv").write_text("\n".join(lines) + "\n")

        lines = ["model,mean_deviance,p_d,dic,n_draws,note"]
        for r in self.rows:
            if r.dic is not None:
                d = r.dic
                lines.append(
                    f"{r.model_id},{d['mean_deviance']!r},{d['p_d']!r},"
                    f"{d['dic']!r},{d['n_draws']},{d['note'] or ''}"
                )
        (out / "dic.csv").write_text("\n".join(lines) + "\n")

        lines = ["model,max_r50,max_r975,n_flagged"]
        for r in self.rows:
            if r.convergence is not None:
                c = r.convergence
                lines.append(
                    f"{r.model_id},{c['max_r50']!r},{c['max_r975']!r},{c['n_flagged']}"
                )
        (out / "convergence.csv").write_text("\n".join(lines) + "\n")

        lines = ["model,window,ok,runtime_seconds,error"]
        for r in self.rows:
            lines.append(
                f"{r.model_id},{r.window},{int(r.ok)},{r.runtime_seconds!r},"
                f"{r.error or ''}"
            )
        (out / "timing.csv").write_text("\n".join(lines) + "\n")


def _window_observations(table: AlignedTable, lakes, windows):
    obs = []
    for lake in lakes:
        level = table.level_series(lake)
        for w in windows:
            obs.append(delta_h(level, w, table.span))
    return obs


def run_design(
    design: DesignMatrix,
    priors: PriorSpec,
    table: AlignedTable,
    *,
    windows: tuple[int, ...] = (1, 12, 60),
    include_ppc: bool = True,
    keep_stores: bool = False,
    out_dir: str | Path | None = None,
    store_dir: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    force: bool = False,
    parallel: bool | None = None,
    progress=None,
) -> ExperimentReport:
    """Run every model in the design on the same data and priors.

    Per model: build the network, sample, then diagnose (convergence, DIC,
    and — unless ``include_ppc`` is off — storage-change closure over
    ``windows``). ``runtime_seconds`` is the sampling wall clock only.
    Exceptions are captured as failure rows so one model cannot take down
    the batch. ``keep_stores`` retains the draws in memory for
    :func:`compare`; ``store_dir`` additionally saves each model's draws
    under ``store_dir/<model_id>``. With ``checkpoint_dir`` each model
    checkpoints under its own subdirectory, and ``resume=True`` picks an
    interrupted batch back up from those files. ``progress`` (a callable
    taking one string) receives a line per model.
    """
    report = ExperimentReport(
        rows=[],
        settings=design.settings,
        seed=design.settings.seed,
        windows=tuple(int(w) for w in windows),
        data_ref=design.data_ref,
        priors_ref=design.priors_ref,
    )
    for config in design.configs:
        row = ModelRow(model_id=config.id, window=config.window, ok=False)
        report.rows.append(row)
        try:
            net = build(config, priors, table)
            ck = (
                Path(checkpoint_dir) / config.id
                if checkpoint_dir is not None
                else None
            )
            store = run(
                net,
                design.settings,
                parallel=parallel,
                checkpoint_dir=ck,
                resume=resume,
            )
            if store.failed:
                raise ExperimentError(store.abort_reason or "sampler aborted")
            row.runtime_seconds = store.total_duration
            row.chain_seconds = list(store.durations)
            if keep_stores:
                report.stores[config.id] = store
            if store_dir is not None:
                store.save(Path(store_dir) / config.id, force=force)
            if design.settings.chains > 1:
                row.convergence = psrf(
                    store.draws, store.parameter_names()
                ).summary()
            row.dic = dic(net, store).summary()
            if include_ppc:
                obs = _window_observations(table, net.lakes, report.windows)
                row.closure = closure(net, store, obs, windows=report.windows).summary()
            row.ok = True
        except Exception as exc:  # noqa: BLE001 - failure isolation is the contract
            row.ok = False
            row.error = f"{type(exc).__name__}: {exc}"
        if progress is not None:
            status = "ok" if row.ok else f"FAILED ({row.error})"
            progress(
                f"{config.id}: {status}"
                + (f"  [{row.runtime_seconds:.1f}s]" if row.ok else "")
            )
    if out_dir is not None:
        report.write(out_dir, force=force)
    return report


# ---------------------------------------------------------------------------
# Pairwise comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonRow:
    parameter: str
    baseline_mean: float
    baseline_sd: float
    baseline_lo: float
    baseline_hi: float
    candidate_mean: float
    candidate_sd: float
    candidate_lo: float
    candidate_hi: float

    @property
    def sd_ratio(self) -> float:
        if self.baseline_sd == 0.0:
            return float("nan") if self.candidate_sd != 0.0 else 1.0
        return self.candidate_sd / self.baseline_sd


@dataclass
class ComparisonTable:
    baseline_id: str
    candidate_id: str
    rows: list[ComparisonRow]

    def row(self, parameter: str) -> ComparisonRow:
        for r in self.rows:
            if r.parameter == parameter:
                return r
        raise ExperimentError(f"parameter {parameter!r} not in comparison")

    def sd_ratios(self) -> np.ndarray:
        return np.array([r.sd_ratio for r in self.rows])

    def write_csv(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / f"comparison_{self.baseline_id}_vs_{self.candidate_id}.csv"
        lines = [
            "parameter,baseline_mean,baseline_sd,baseline_q2.5,baseline_q97.5,"
            "candidate_mean,candidate_sd,candidate_q2.5,candidate_q97.5,sd_ratio"
        ]
        for r in self.rows:
            lines.append(
                f"{r.parameter},{r.baseline_mean!r},{r.baseline_sd!r},"
                f"{r.baseline_lo!r},{r.baseline_hi!r},{r.candidate_mean!r},"
                f"{r.candidate_sd!r},{r.candidate_lo!r},{r.candidate_hi!r},"
                f"{r.sd_ratio!r}"
            )
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
        return path


def _store_for(source, model_id: str) -> SampleStore:
    if isinstance(source, ExperimentReport):
        store = source.stores.get(model_id)
        if store is None:
            if model_id not in source.ids():
                raise ExperimentError(f"model {model_id!r} not in report")
            raise ExperimentError(
                f"no draws retained for {model_id!r}; run the design with "
                "keep_stores=True (or pass SampleStores directly)"
            )
        return store
    store = source.get(model_id)
    if store is None:
        raise ExperimentError(f"model {model_id!r} not in store mapping")
    return store


def compare(
    source,
    baseline_id: str,
    candidate_id: str,
    parameters: list[str] | None = None,
) -> ComparisonTable:
    """Posterior mean/SD/95%-interval table for two models, side by side.

    ``source`` is an :class:`ExperimentReport` with retained stores, or a
    plain ``{model_id: SampleStore}`` mapping. Default parameters are every
    monitored channel outflow (``Q_*``) of the baseline, in name order.
    Parameters must be monitored in both models; a missing one raises an
    error naming it and the model.
    """
    base = _store_for(source, baseline_id)
    cand = _store_for(source, candidate_id)
    if parameters is None:
        parameters = [n for n in base.parameter_names() if n.startswith("Q_")]
        if not parameters:
            raise ExperimentError(
                f"model {baseline_id!r} monitored no Q parameters; "
                "pass parameters explicitly"
            )
    rows = []
    for name in parameters:
        for mid, store in ((baseline_id, base), (candidate_id, cand)):
            if name not in store:
                raise ExperimentError(
                    f"parameter {name!r} is not monitored in model {mid!r}"
                )
        b = base.flat(name)
        c = cand.flat(name)
        b_lo, b_hi = np.percentile(b, [2.5, 97.5])
        c_lo, c_hi = np.percentile(c, [2.5, 97.5])
        rows.append(
            ComparisonRow(
                parameter=name,
                baseline_mean=float(b.mean()),
                baseline_sd=float(b.std(ddof=1)),
                baseline_lo=float(b_lo),
                baseline_hi=float(b_hi),
                candidate_mean=float(c.mean()),
                candidate_sd=float(c.std(ddof=1)),
                candidate_lo=float(c_lo),
                candidate_hi=float(c_hi),
            )
        )
    return ComparisonTable(baseline_id=baseline_id, candidate_id=candidate_id, rows=rows)
