"""Command-line front end: prior fitting, single runs, batch experiments.

Every command validates its inputs before touching the output directory and
exits 2 on configuration problems (bad model id, missing file, malformed
span), 1 on runtime failures (a chain aborting mid-run), 0 on success.
Existing non-empty output locations are refused without ``--force``. All
emitted JSON carries a ``schema_version``; CSVs open with a stamp comment
identifying the package version, model, and seed so an artifact can always
be traced back to the run that produced it.

Chain-level parallelism is controlled by the ``L2SWBM_THREADS`` environment
variable (values above 1 let chains run concurrently); results are identical
either way.
"""

from __future__ import annotations

import json
import re
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np

from . import __version__
from .diagnostics import DiagnosticsError, closure, dic, psrf, psrf_trajectory
from .experiment import (
    CANONICAL_IDS,
    DesignMatrix,
    ExperimentError,
    canonical_design,
    compare,
    run_design,
)
from .fixtures import ANALYSIS_MONTHS, ANALYSIS_START
from .ingest import IngestError, Span, align, delta_h, load_catalog
from .network import COMPONENTS, BuildError, build, make_config
from .priors import DEFAULT_RULES, FitRules, PriorError, PriorSpec, fit_all
from .sampler import SampleStore, SamplerError, SamplerSettings, run

MANIFEST_SCHEMA_VERSION = 1

#: exception types that indicate a configuration / input problem (exit 2)
#: rather than a mid-run failure (exit 1)
_CONFIG_ERRORS = (
    IngestError,
    PriorError,
    BuildError,
    ExperimentError,
    SamplerError,  # only raised pre-run by SamplerSettings validation
    OSError,
    ValueError,
    json.JSONDecodeError,
)


@dataclass
class RunManifest:
    """The resolved inputs of one command, written beside its outputs.

    Paths are stored as given (not resolved to absolutes) so a manifest
    stays portable with the directory tree it lives in; ``validate``
    checks they exist relative to the current working directory.
    """

    command: str
    data: str | None
    priors: str | None
    out_dir: str
    settings: dict = field(default_factory=dict)
    model_id: str | None = None
    design: str | None = None
    windows: tuple[int, ...] = (1, 12, 60)
    include_ppc: bool = True
    span: str | None = None
    version: str = __version__
    schema_version: int = MANIFEST_SCHEMA_VERSION

    @property
    def seed(self) -> int:
        return int(self.settings.get("seed", 0))

    def validate(self) -> None:
        for label, p in (("data", self.data), ("priors", self.priors),
                         ("design", self.design)):
            if p is not None and not Path(p).exists():
                raise ValueError(f"{label} path {p!r} does not exist")

    def write(self, path: Path) -> None:
        d = asdict(self)
        d["windows"] = list(self.windows)
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _die(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _stamp(path: Path, model_id: str | None, seed: int) -> None:
    """Prepend the provenance comment line to a CSV the CLI just wrote."""
    head = f"# l2swbm {__version__} schema={MANIFEST_SCHEMA_VERSION}"
    if model_id is not None:
        head += f" model={model_id}"
    head += f" seed={seed}\n"
    path.write_text(head + path.read_text())


def _parse_span(start: str, months: int) -> Span:
    m = re.fullmatch(r"(\d{4})-(\d{1,2})", start)
    if not m:
        raise ValueError(f"--start must look like YYYY-MM, got {start!r}")
    return Span(int(m.group(1)), int(m.group(2)), months)


def _prepare_out(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ValueError(
                f"output directory {out!r} exists and is not empty; "
                "pass --force to overwrite"
            )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_inputs(data: str, priors: str, span: Span):
    catalog = load_catalog(Path(data) / "declarations.json")
    table = align(catalog, span, ("SUP", "MHU"))
    spec = PriorSpec.from_json(priors)
    return table, spec


def _settings(k, chains, seed, burn_in, retain) -> SamplerSettings:
    return SamplerSettings(
        iterations=k,
        chains=chains,
        seed=seed,
        burn_in=burn_in,
        retained_per_chain=retain,
    )


def _run_options(fn):
    for opt in reversed([
        click.option("--data", required=True, metavar="DIR",
                     help="Directory holding declarations.json plus the series CSVs."),
        click.option("--priors", required=True, metavar="FILE",
                     help="Prior specification JSON (see fit-priors)."),
        click.option("--k", "--iterations", "k", default=50_000,
                     show_default=True, help="MCMC iterations per chain."),
        click.option("--chains", default=3, show_default=True),
        click.option("--seed", default=0, show_default=True),
        click.option("--burn-in", default=None, type=int,
                     help="Discarded iterations (default: half of --k)."),
        click.option("--retain", default=1000, show_default=True,
                     help="Retained draws per chain after thinning."),
        click.option("--no-ppc", is_flag=True,
                     help="Skip the posterior-predictive closure pass."),
        click.option("--start", default="{:04d}-{:02d}".format(*ANALYSIS_START),
                     show_default=True, help="First analysis month, YYYY-MM."),
        click.option("--months", default=ANALYSIS_MONTHS, show_default=True,
                     help="Length of the analysis span."),
        click.option("--out", required=True, metavar="DIR"),
        click.option("--force", is_flag=True,
                     help="Overwrite an existing output directory."),
        click.option("--checkpoint-dir", default=None, metavar="DIR",
                     help="Write restart files here every checkpoint interval."),
        click.option("--resume", is_flag=True,
                     help="Continue from files in --checkpoint-dir."),
    ]):
        fn = opt(fn)
    return fn


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="l2swbm")
def main():
    """Bayesian water-balance inference for a two-lake system."""


# ---------------------------------------------------------------------------
# fit-priors
# ---------------------------------------------------------------------------


@main.command("fit-priors")
@click.argument("history_dir", metavar="HISTORY_DIR")
@click.option("--rules", default=None, metavar="FILE",
              help="JSON overriding the per-component fitting rules.")
@click.option("--out", required=True, metavar="FILE",
              help="Where to write the prior specification JSON.")
@click.option("--force", is_flag=True)
def cmd_fit_priors(history_dir, rules, out, force):
    """Fit monthly priors from the long historical record.

    HISTORY_DIR must contain a declarations.json catalog; one prior cell is
    fit per (lake, component, calendar month) from the unmasked history.
    """
    try:
        out_path = Path(out)
        if out_path.exists() and not force:
            raise ValueError(f"{out!r} exists; pass --force to overwrite")
        fit_rules = DEFAULT_RULES if rules is None else FitRules.from_json(rules)
        catalog = load_catalog(Path(history_dir) / "declarations.json")
        spec = fit_all(catalog, fit_rules)
    except _CONFIG_ERRORS as exc:
        _die(2, str(exc))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    spec.to_json(out_path)
    click.echo(f"fit {len(spec.cells)} prior cells -> {out}")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _flow_interval_csv(store: SampleStore, lakes, T: int, path: Path) -> None:
    """Per-month posterior mean/sd/95% interval for every balance component."""
    lines = ["lake,component,month,mean,sd,q2.5,q97.5"]
    comps = list(COMPONENTS) + ["I"]
    for lake in lakes:
        for comp in comps:
            for t in range(1, T + 1):
                name = f"{comp}_{lake}_{t}"
                if name not in store:
                    continue
                x = store.flat(name)
                lo, hi = (float(q) for q in np.percentile(x, (2.5, 97.5)))
                lines.append(
                    f"{lake},{comp},{t},{float(x.mean())!r},"
                    f"{float(x.std())!r},{lo!r},{hi!r}"
                )
    path.write_text("\n".join(lines) + "\n")


@main.command("run")
@click.option("--model", required=True, metavar="ID",
              help="Model id from the design grammar, e.g. 12FF or fPROT.")
@click.option("--trajectory", is_flag=True,
              help="Record checkpoint-by-checkpoint convergence.")
@_run_options
def cmd_run(model, trajectory, data, priors, k, chains, seed, burn_in, retain,
            no_ppc, start, months, out, force, checkpoint_dir, resume):
    """Sample one model and write its draws plus diagnostics.

    Outputs: run_manifest.json (inputs), store/ (draws + timing),
    psrf.csv, dic.json, run_report.json, and — unless --no-ppc —
    closure.csv, closure_bands.csv, and flows.csv for plotting.
    """
    try:
        try:
            config = make_config(model)
        except BuildError:
            raise BuildError(
                f"unknown model id {model!r}; valid ids: "
                + " ".join(CANONICAL_IDS)
            ) from None
        span = _parse_span(start, months)
        settings = _settings(k, chains, seed, burn_in, retain)
        manifest = RunManifest(
            command="run",
            data=data,
            priors=priors,
            out_dir=out,
            settings=settings.as_dict(),
            model_id=model,
            include_ppc=not no_ppc,
            span=str(span),
        )
        manifest.validate()
        table, spec = _load_inputs(data, priors, span)
        net = build(config, spec, table)
        out_path = _prepare_out(out, force)
    except _CONFIG_ERRORS as exc:
        _die(2, str(exc))

    manifest.write(out_path / "run_manifest.json")
    click.echo(
        f"model {model}: K={settings.iterations} chains={settings.chains} "
        f"seed={settings.seed} span={span}"
    )
    try:
        store = run(
            net,
            settings,
            out_dir=out_path / "store",
            force=True,
            trajectory=trajectory,
            checkpoint_dir=checkpoint_dir,
            resume=resume,
        )
        if store.failed:
            raise SamplerError(store.abort_reason or "sampler aborted")

        conv = None
        if settings.chains > 1:
            conv = psrf(store.draws, store.parameter_names())
            conv.write_csv(out_path / "psrf.csv")
            _stamp(out_path / "psrf.csv", model, settings.seed)
        score = dic(net, store)
        report = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "version": __version__,
            "model_id": model,
            "seed": settings.seed,
            "convergence": None if conv is None else conv.summary(),
            "dic": score.summary(),
            "closure": None,
        }
        if trajectory:
            traj = psrf_trajectory(store)
            traj.write_csv(out_path / "trajectory.csv")
            _stamp(out_path / "trajectory.csv", model, settings.seed)
        if not no_ppc:
            lev = [
                delta_h(table.level_series(lake), w, span)
                for lake in net.lakes
                for w in (1, 12, 60)
            ]
            ppc = closure(net, store, lev, keep_bands=True)
            ppc.write_csv(out_path / "closure.csv")
            ppc.write_bands_csv(out_path / "closure_bands.csv")
            _flow_interval_csv(store, net.lakes, net.T, out_path / "flows.csv")
            for f in ("closure.csv", "closure_bands.csv", "flows.csv"):
                _stamp(out_path / f, model, settings.seed)
            report["closure"] = ppc.summary()
        (out_path / "run_report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n"
        )
    except (SamplerError, DiagnosticsError, BuildError, OSError) as exc:
        _die(1, str(exc))

    click.echo(f"sampling took {store.total_duration:.1f}s wall clock")
    if conv is not None:
        cs = conv.summary()
        click.echo(f"psrf: max R50 {cs['max_r50']:.4f}, flagged {cs['n_flagged']}")
    click.echo(f"dic: {score.dic:.1f} (pD {score.p_d:.1f})")
    if not no_ppc:
        for r in ppc.rows:
            pct = "n/a" if r.percent is None else f"{r.percent:.1f}%"
            click.echo(f"closure {r.lake} w={r.window}: {pct}")
    click.echo(f"wrote {out}")


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


@main.command("experiment")
@click.option("--canonical", is_flag=True,
              help="Run the full 26-variant factorial grid.")
@click.option("--design", "design_path", default=None, metavar="FILE",
              help="JSON design matrix (subset of models, custom settings).")
@click.option("--save-stores", is_flag=True,
              help="Also save every model's draws under OUT/stores/<id>.")
@_run_options
def cmd_experiment(canonical, design_path, save_stores, data, priors, k,
                   chains, seed, burn_in, retain, no_ppc, start, months, out,
                   force, checkpoint_dir, resume):
    """Run a batch of models on the same data and write the report tables.

    Exactly one of --canonical / --design selects the batch. Failures are
    isolated per model: the command exits 1 if any row failed, but always
    writes the full report first.
    """
    try:
        if canonical == (design_path is not None):
            raise ValueError("pass exactly one of --canonical or --design")
        span = _parse_span(start, months)
        settings = _settings(k, chains, seed, burn_in, retain)
        if canonical:
            design = canonical_design(settings)
        else:
            design = DesignMatrix.from_json(design_path)
            design = DesignMatrix(
                configs=design.configs,
                settings=settings,
                data_ref=data,
                priors_ref=priors,
            )
        manifest = RunManifest(
            command="experiment",
            data=data,
            priors=priors,
            out_dir=out,
            settings=settings.as_dict(),
            design=design_path,
            include_ppc=not no_ppc,
            span=str(span),
        )
        manifest.validate()
        table, spec = _load_inputs(data, priors, span)
        out_path = _prepare_out(out, force)
    except _CONFIG_ERRORS as exc:
        _die(2, str(exc))

    manifest.write(out_path / "run_manifest.json")
    click.echo(
        f"{len(design.configs)} models: K={settings.iterations} "
        f"chains={settings.chains} seed={settings.seed}"
    )
    report = run_design(
        design,
        spec,
        table,
        include_ppc=not no_ppc,
        out_dir=out_path,
        store_dir=out_path / "stores" if save_stores else None,
        checkpoint_dir=checkpoint_dir,
        resume=resume,
        force=True,
        progress=click.echo,
    )
    failures = report.failures()
    click.echo(f"wrote {out} ({len(report.rows)} rows)")
    if failures:
        _die(1, f"{len(failures)} of {len(report.rows)} models failed: "
                + " ".join(r.model_id for r in failures))


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


@main.command("compare")
@click.argument("baseline", metavar="BASELINE_ID")
@click.argument("candidate", metavar="CANDIDATE_ID")
@click.option("--stores", required=True, metavar="DIR",
              help="Directory of saved stores (experiment --save-stores).")
@click.option("--parameter", "parameters", multiple=True, metavar="NAME",
              help="Monitored node to tabulate (repeatable; default Q_*).")
@click.option("--out", default=None, metavar="DIR",
              help="Where to write the CSV (default: the stores directory).")
def cmd_compare(baseline, candidate, stores, parameters, out):
    """Tabulate posterior mean/SD/interval for two saved models."""
    try:
        pair = {}
        for mid in (baseline, candidate):
            path = Path(stores) / mid
            if not path.is_dir():
                raise ValueError(f"no saved store for {mid!r} under {stores}")
            pair[mid] = SampleStore.load(path)
        table = compare(pair, baseline, candidate, list(parameters) or None)
    except _CONFIG_ERRORS as exc:
        _die(2, str(exc))
    dest = Path(out) if out is not None else Path(stores)
    dest.mkdir(parents=True, exist_ok=True)
    path = table.write_csv(dest)
    _stamp(path, f"{baseline}-vs-{candidate}", pair[baseline].settings.seed)
    ratios = table.sd_ratios()
    click.echo(
        f"{len(table.rows)} parameters; median SD ratio "
        f"{np.nanmedian(ratios):.3f} ({candidate} / {baseline})"
    )
    click.echo(f"wrote {path}")


# ---------------------------------------------------------------------------
# fixture
# ---------------------------------------------------------------------------


@main.command("fixture")
@click.option("--seed", default=11, show_default=True)
@click.option("--out", required=True, metavar="DIR")
@click.option("--force", is_flag=True)
def cmd_fixture(seed, out, force):
    """Write the synthetic two-lake data set (history/, data/, truth.csv)."""
    from . import fixtures

    try:
        out_path = _prepare_out(out, force)
    except _CONFIG_ERRORS as exc:
        _die(2, str(exc))
    fx = fixtures.generate(seed)
    fx.write(out_path)
    (out_path / "fixture_manifest.json").write_text(
        json.dumps(
            {
                "schema_version": MANIFEST_SCHEMA_VERSION,
                "version": __version__,
                "seed": seed,
                "span": str(fx.span),
                "lakes": list(fx.lakes),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    click.echo(f"wrote fixture (seed {seed}) to {out}")
    click.echo(f"next: l2swbm fit-priors {out}/history --out priors.json")


if __name__ == "__main__":
    main()
