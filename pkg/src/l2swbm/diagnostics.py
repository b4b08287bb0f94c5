"""Convergence, information-criterion, and closure checks over sample stores.

Three families of diagnostics, all pure functions of an immutable
:class:`~l2swbm.sampler.SampleStore` (plus the network that produced it):

* :func:`psrf` / :func:`psrf_trajectory` -- Gelman-Rubin potential scale
  reduction, point and 97.5% upper estimates, per parameter and as maxima
  along checkpoint iterations;
* :func:`dic` -- deviance information criterion with the plug-in ``pD``
  penalty;
* :func:`closure` -- posterior-predictive coverage of observed water-level
  changes over 1-, 12-, and 60-month spans.

Every report knows how to emit itself as a plot-ready CSV and a JSON-safe
summary dict.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .ingest import DeltaHObservations
from .network import Network, deviance
from .sampler import SampleStore

PSRF_FLAG = 1.1  # parameters above this are reported as unconverged


class DiagnosticsError(Exception):
    """Raised when a diagnostic's preconditions are not met."""


# ---------------------------------------------------------------------------
# potential scale reduction factor
# ---------------------------------------------------------------------------


@dataclass
class PsrfReport:
    """Per-parameter scale-reduction estimates for one set of chains."""

    names: list[str]
    point: np.ndarray  # R-hat, 50% (point) estimate, per parameter
    upper: np.ndarray  # 97.5% upper estimate, per parameter
    degenerate: np.ndarray  # True where all chains were a single constant
    n_chains: int
    n_draws: int

    @property
    def max_point(self) -> float:
        return float(np.max(self.point))

    @property
    def max_upper(self) -> float:
        return float(np.max(self.upper))

    def flagged(self) -> list[str]:
        """Parameters whose point estimate exceeds 1.1."""
        return [n for n, r in zip(self.names, self.point) if r > PSRF_FLAG]

    def summary(self) -> dict:
        return {
            "n_chains": self.n_chains,
            "n_draws": self.n_draws,
            "max_r50": self.max_point,
            "max_r975": self.max_upper,
            "n_flagged": len(self.flagged()),
            "flagged": self.flagged(),
        }

    def write_csv(self, path) -> None:
        lines = ["parameter,r50,r975,degenerate"]
        for i, name in enumerate(self.names):
            lines.append(
                f"{name},{float(self.point[i])!r},{float(self.upper[i])!r},"
                f"{int(self.degenerate[i])}"
            )
        Path(path).write_text("\n".join(lines) + "\n")


def _as_chain_array(draws) -> tuple[np.ndarray, list[str] | None]:
    if isinstance(draws, SampleStore):
        return draws.draws, list(draws.names)
    x = np.asarray(draws, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise DiagnosticsError(
            f"draws must be (chains, draws) or (chains, draws, params), got shape {x.shape}"
        )
    return x, None


def psrf(draws, names: list[str] | None = None) -> PsrfReport:
    """Gelman-Rubin diagnostic over parallel chains.

    ``draws`` is a (chains, draws[, params]) array or a
    :class:`~l2swbm.sampler.SampleStore`. Follows the classical
    between/within variance decomposition with the degrees-of-freedom
    adjustment and an F-distribution upper bound, so values agree with the
    standard multi-chain implementation of the estimator.

    Parameters where every chain is a single constant value get a
    ``degenerate`` flag and R-hat 1.0; constant chains at *different* values
    report ``inf``.
    """
    x, store_names = _as_chain_array(draws)
    m, n, p = x.shape
    if m < 2:
        raise DiagnosticsError(f"psrf needs at least 2 chains, got {m}")
    if n < 10:
        raise DiagnosticsError(f"psrf needs at least 10 draws per chain, got {n}")
    if names is None:
        names = store_names or [f"param_{i}" for i in range(p)]
    if len(names) != p:
        raise DiagnosticsError(f"{p} parameters but {len(names)} names")

    xbar = x.mean(axis=1)  # (m, p) chain means
    s2 = x.var(axis=1, ddof=1)  # (m, p) chain variances
    W = s2.mean(axis=0)
    B = n * xbar.var(axis=0, ddof=1)
    muhat = xbar.mean(axis=0)

    def cov_chains(a, b):
        return ((a - a.mean(axis=0)) * (b - b.mean(axis=0))).sum(axis=0) / (m - 1)

    var_w = s2.var(axis=0, ddof=1) / m
    var_b = 2.0 * B**2 / (m - 1)
    cov_wb = (n / m) * (
        cov_chains(s2, xbar**2) - 2.0 * muhat * cov_chains(s2, xbar)
    )
    V = (n - 1) / n * W + (1 + 1 / m) * B / n
    var_V = (
        (n - 1) ** 2 * var_w
        + (1 + 1 / m) ** 2 * var_b
        + 2 * (n - 1) * (1 + 1 / m) * cov_wb
    ) / n**2

    with np.errstate(divide="ignore", invalid="ignore"):
        df_V = 2.0 * V**2 / var_V
        df_adj = np.where(var_V > 0, (df_V + 3.0) / (df_V + 1.0), 1.0)
        w_df = np.where(var_w > 0, 2.0 * W**2 / var_w, 1e15)
        r2_fixed = (n - 1) / n
        r2_random = (1 + 1 / m) / n * (B / W)
        qf = stats.f.ppf(0.975, m - 1, w_df)
        point = np.sqrt(df_adj * (r2_fixed + r2_random))
        upper = np.sqrt(df_adj * (r2_fixed + qf * r2_random))

    flat = W == 0  # every chain internally constant
    degenerate = flat & (B == 0)
    point = np.where(flat, np.where(degenerate, 1.0, np.inf), point)
    upper = np.where(flat, np.where(degenerate, 1.0, np.inf), upper)
    return PsrfReport(
        names=list(names),
        point=point,
        upper=upper,
        degenerate=degenerate,
        n_chains=m,
        n_draws=n,
    )


@dataclass
class TrajectoryRow:
    iteration: int
    max_r50: float
    max_r975: float


@dataclass
class TrajectoryReport:
    """Checkpoint-by-checkpoint convergence trace.

    ``rows`` are emitted even when the chains never converge; checkpoints
    too early to evaluate (under 2,000 draws) land in ``skipped`` with a
    note instead.
    """

    rows: list[TrajectoryRow]
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        lines = ["iteration,max_r50,max_r975"]
        for r in self.rows:
            lines.append(f"{r.iteration},{r.max_r50!r},{r.max_r975!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self) -> dict:
        return {
            "checkpoints": [
                [r.iteration, r.max_r50, r.max_r975] for r in self.rows
            ],
            "skipped": [[it, note] for it, note in self.skipped],
        }


def psrf_trajectory(store: SampleStore) -> TrajectoryReport:
    """PSRF maxima along the run, evaluated at each checkpoint interval.

    At checkpoint iteration ``c`` the first half of each chain is treated as
    burn-in and the latter half is thinned to 1,000 draws per chain (the
    iterations ``c - k * (c // 2000)`` for ``k = 0..999``). Checkpoints with
    fewer than 2,000 draws cannot honour that rule and are skipped with a
    note. Requires a store produced by ``run(..., trajectory=True)``.
    """
    traj = store.trajectory
    if traj is None:
        raise DiagnosticsError(
            "store has no trajectory buffer; run with trajectory=True"
        )
    interval = int(traj["interval"])
    stride = int(traj["stride"])
    buffered = np.asarray(traj["iterations"])
    draws = traj["draws"]  # (chains, snapshots, params)
    completed = int(traj["completed"])

    rows: list[TrajectoryRow] = []
    skipped: list[tuple[int, str]] = []
    for c in range(interval, completed + 1, interval):
        s = c // 2000
        if s == 0:
            skipped.append((c, "fewer than 2,000 draws per chain"))
            continue
        wanted = np.arange(c - 999 * s, c + 1, s)
        idx = wanted // stride - 1
        if idx[0] < 0 or idx[-1] >= draws.shape[1] or not np.array_equal(
            buffered[idx], wanted
        ):
            raise DiagnosticsError(
                f"trajectory buffer does not cover checkpoint {c}"
            )
        rep = psrf(draws[:, idx, :], names=list(store.names))
        rows.append(TrajectoryRow(c, rep.max_point, rep.max_upper))
    return TrajectoryReport(rows=rows, skipped=skipped)


# ---------------------------------------------------------------------------
# deviance information criterion
# ---------------------------------------------------------------------------


@dataclass
class DicScore:
    mean_deviance: float
    p_d: float
    dic: float
    n_draws: int
    note: str | None = None

    def summary(self) -> dict:
        return {
            "mean_deviance": self.mean_deviance,
            "p_d": self.p_d,
            "dic": self.dic,
            "n_draws": self.n_draws,
            "note": self.note,
        }


def _n_unmasked_obs(net: Network) -> int:
    if net.kind == "generic":
        return sum(1 for o in net.gen_obs if o.mask)
    count = int(net.mdh.sum())
    for src in net.sources:
        count += int(src.mask.sum())
    return count


def dic(net: Network, store: SampleStore, draws: int = 1000) -> DicScore:
    """Deviance information criterion from retained draws.

    ``D(state) = -2 * sum(unmasked observation log-likelihoods)``; the mean
    deviance is taken over ``draws`` states sampled evenly from the store
    (chain-major order), and ``pD`` subtracts the deviance at the
    posterior-mean state computed over the *same* subset of draws, with
    means taken on the sampled scale for every parameter. With every
    observation masked the deviance is identically zero and the score says
    so rather than emitting NaNs.
    """
    missing = [n for n in net.stochastic_names if n not in store._index]
    if missing:
        raise DiagnosticsError(
            f"store does not cover the full state; missing {missing[:5]}"
            + ("..." if len(missing) > 5 else "")
        )
    if draws < 1:
        raise DiagnosticsError("dic needs at least one draw")
    C, R, P = store.draws.shape
    total = C * R
    flat = store.draws.reshape(total, P)
    k = min(draws, total)
    sel = np.round(np.linspace(0, total - 1, k)).astype(int)
    slots = np.array([net.nodes[n].slot for n in store.names])

    state = net.new_state()
    devs = np.empty(len(sel))
    for i, d in enumerate(sel):
        state.vector[slots] = flat[d]
        devs[i] = deviance(net, state)
    mean_dev = float(devs.mean())

    state.vector[slots] = flat[sel].mean(axis=0)
    dev_at_mean = deviance(net, state)
    if not np.isfinite(dev_at_mean):
        raise DiagnosticsError(
            "deviance at the posterior-mean state is not finite"
        )
    p_d = mean_dev - float(dev_at_mean)
    note = None
    if _n_unmasked_obs(net) == 0:
        note = "all observations masked; deviance identically 0"
    return DicScore(
        mean_deviance=mean_dev,
        p_d=p_d,
        dic=mean_dev + p_d,
        n_draws=len(sel),
        note=note,
    )


# ---------------------------------------------------------------------------
# posterior-predictive closure
# ---------------------------------------------------------------------------


@dataclass
class ClosureRow:
    lake: str
    window: int
    denominator: int  # number of windows in the span, T - window + 1
    n_observed: int  # of those, how many have an observed level change
    n_inside: int
    percent: float | None  # None when nothing was observed
    note: str | None = None


@dataclass
class ClosureReport:
    rows: list[ClosureRow]
    level: float
    n_draws: int
    #: per (lake, window): float array (J, 4) of observed, lo, hi, inside
    #: (inside is 1/0, or -1 where the observation is masked); populated
    #: only when ``closure(..., keep_bands=True)``.
    bands: dict[tuple[str, int], np.ndarray] | None = None

    def row(self, lake: str, window: int) -> ClosureRow:
        for r in self.rows:
            if r.lake == lake and r.window == window:
                return r
        raise KeyError(f"no closure row for ({lake}, {window})")

    def write_bands_csv(self, path) -> None:
        """Plot-ready interval bands: one row per (lake, window, position).

        ``position`` is the 1-based month offset of the first month the
        window covers.
        """
        if self.bands is None:
            raise DiagnosticsError(
                "no bands captured; run closure(..., keep_bands=True)"
            )
        lines = ["lake,window,position,observed,lo,hi,inside"]
        for (lake, w), arr in self.bands.items():
            for j in range(arr.shape[0]):
                obs, lo, hi, inside = (float(v) for v in arr[j])
                o = "" if inside < 0 else repr(obs)
                flag = "" if inside < 0 else str(int(inside))
                lines.append(f"{lake},{w},{j + 1},{o},{lo!r},{hi!r},{flag}")
        Path(path).write_text("\n".join(lines) + "\n")

    def write_csv(self, path) -> None:
        lines = ["lake,window,denominator,n_observed,n_inside,percent"]
        for r in self.rows:
            pct = "" if r.percent is None else repr(r.percent)
            lines.append(
                f"{r.lake},{r.window},{r.denominator},{r.n_observed},"
                f"{r.n_inside},{pct}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def summary(self) -> dict:
        return {
            "level": self.level,
            "n_draws": self.n_draws,
            "rows": [
                {
                    "lake": r.lake,
                    "window": r.window,
                    "denominator": r.denominator,
                    "n_observed": r.n_observed,
                    "n_inside": r.n_inside,
                    "percent": r.percent,
                    "note": r.note,
                }
                for r in self.rows
            ],
        }


def _balance_draws(net: Network, store: SampleStore) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct per-draw monthly balances from stored parameter columns.

    Returns ``(b, tau_dh)`` with shapes (n_draws, lakes, T) and
    (n_draws, lakes). Raises if the store is missing any latent the balance
    needs.
    """
    C, R, P = store.draws.shape
    N = C * R
    flat = store.draws.reshape(N, P)
    index = store._index

    def cols(names):
        missing = [n for n in names if n not in index]
        if missing:
            raise DiagnosticsError(
                f"store lacks parameters needed for closure: {missing[:4]}"
                + ("..." if len(missing) > 4 else "")
            )
        return flat[:, [index[n] for n in names]]

    T, L = net.T, net.L
    b = np.zeros((N, L, T))
    q_draws: list[np.ndarray] = []
    for li, lake in enumerate(net.lakes):
        for ci, comp in enumerate(net.comps):
            th = cols([f"{comp}_{lake}_{t + 1}" for t in range(T)])
            b[:, li] += net.sign[ci] * th
            if comp == "Q":
                q_draws.append(th)
    for up, (dn, fac) in net.downstream.items():
        b[:, dn] += fac * q_draws[up]
    if net.eps_mode == "hier":
        for li, lake in enumerate(net.lakes):
            b[:, li] += cols([f"eps_{lake}_{t + 1}" for t in range(T)])
    elif net.eps_mode == "fixed":
        for li, lake in enumerate(net.lakes):
            seas = cols([f"eps_{lake}_cal{c + 1}" for c in range(12)])
            b[:, li] += seas[:, net.cmap]
    tau_dh = cols([f"tau_dh_{lake}" for lake in net.lakes])
    return b, tau_dh


def closure(
    net: Network,
    store: SampleStore,
    observations,
    windows: tuple[int, ...] = (1, 12, 60),
    level: float = 0.95,
    seed: int | None = None,
    keep_bands: bool = False,
) -> ClosureReport:
    """Posterior-predictive coverage of observed storage changes.

    For every retained draw, the monthly balance is rebuilt from the stored
    latents, summed over each requested window, and jittered with the
    model's own inferred change-in-storage precision; per (lake, window)
    position the central ``level`` interval is the empirical quantile range
    across draws, and the report counts how many observed changes fall
    inside. ``observations`` is an iterable of
    :class:`~l2swbm.ingest.DeltaHObservations`, one per (lake, window).

    Noise draws are seeded from the store's own seed, so the same inputs
    give the same report; pass ``seed`` to override.
    """
    if net.kind != "l2swbm":
        raise DiagnosticsError("closure is defined for water-balance networks only")
    if not 0 < level < 1:
        raise DiagnosticsError(f"level must be in (0, 1), got {level}")
    for w in windows:
        if not 1 <= int(w) <= net.T:
            raise DiagnosticsError(
                f"window {w} exceeds the {net.T}-month analysis span"
            )
    obs_map: dict[tuple[str, int], DeltaHObservations] = {}
    for o in observations:
        if isinstance(o.window, int):
            obs_map[(o.lake, o.window)] = o

    b, tau_dh = _balance_draws(net, store)
    N = b.shape[0]
    entropy = store.settings.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(entropy), 0x10C5]))
    alpha = 100.0 * (1.0 - level) / 2.0

    rows: list[ClosureRow] = []
    bands: dict[tuple[str, int], np.ndarray] | None = {} if keep_bands else None
    for li, lake in enumerate(net.lakes):
        cs = np.concatenate(
            [np.zeros((N, 1)), np.cumsum(b[:, li], axis=1)], axis=1
        )
        scale = 1.0 / np.sqrt(tau_dh[:, li])[:, None]
        for w in windows:
            w = int(w)
            J = net.T - w + 1
            sums = cs[:, w:] - cs[:, :J]  # (N, J) balance over each window
            ytil = sums + rng.standard_normal((N, J)) * scale
            lo = np.percentile(ytil, alpha, axis=0)
            hi = np.percentile(ytil, 100.0 - alpha, axis=0)
            o = obs_map.get((lake, w))
            if o is None:
                raise DiagnosticsError(
                    f"no observed changes supplied for ({lake}, {w})"
                )
            if o.values.shape != (J,):
                raise DiagnosticsError(
                    f"({lake}, {w}) observations have {o.values.shape[0]} "
                    f"entries, expected {J}"
                )
            inside = o.mask & (o.values >= lo) & (o.values <= hi)
            n_obs = int(o.mask.sum())
            n_in = int(inside.sum())
            if bands is not None:
                flag = np.where(o.mask, inside.astype(float), -1.0)
                bands[(lake, w)] = np.column_stack([o.values, lo, hi, flag])
            if n_obs == 0:
                rows.append(
                    ClosureRow(lake, w, J, 0, 0, None, "no observed changes")
                )
            else:
                rows.append(
                    ClosureRow(lake, w, J, n_obs, n_in, 100.0 * n_in / n_obs)
                )
    return ClosureReport(rows=rows, level=level, n_draws=N, bands=bands)
