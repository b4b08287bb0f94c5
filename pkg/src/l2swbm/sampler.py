"""Multi-chain MCMC over an assembled network.

Conjugate nodes (everything with a normal or gamma full conditional) are
drawn exactly; precipitation and runoff, whose positive-support priors break
conjugacy, are drawn with a univariate stepping-out-and-shrinkage slice
sampler. One iteration is a fixed systematic scan: balance components by
time, then process errors, then biases, then precisions.

Rolling-window models update all months a window-stride apart as one vector
draw (such months never share a window observation, so they are
conditionally independent); the cumulative design couples every pair of
months and falls back to a sequential scalar scan with O(1) bookkeeping per
month.

Chains share only the immutable network. Each chain owns a private RNG
stream spawned from the run seed, so results do not depend on whether chains
execute sequentially or in a thread pool.
"""

from __future__ import annotations

import json
import math
import os
import pickle
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from pathlib import Path

import numpy as np

from . import conditionals as cond
from .network import (
    COMPONENTS,
    THETA_SCAN_ORDER,
    LatentState,
    Network,
    full_conditional,
)

__all__ = [
    "SamplerError",
    "SliceFailureError",
    "SamplerSettings",
    "SampleStore",
    "slice_sample",
    "init_state",
    "gibbs_step",
    "run",
]

STORE_SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1

_NEG_INF = float("-inf")


class SamplerError(Exception):
    """Invalid settings, store misuse, or checkpoint inconsistency."""


class SliceFailureError(SamplerError):
    """Stepping-out exhausted its budget twice (once at doubled width)."""

    def __init__(self, message: str, node: str = ""):
        super().__init__(message if not node else f"{node}: {message}")
        self.node = node


@dataclass(frozen=True)
class SamplerSettings:
    """Run-length, chain, and tuning parameters for one MCMC run.

    ``burn_in`` defaults to half the iterations. Thinning keeps
    ``retained_per_chain`` draws at even intervals counting back from the
    final iteration, so the last retained draw is always iteration K.
    """

    iterations: int
    chains: int = 3
    burn_in: int | None = None
    retained_per_chain: int = 1000
    seed: int = 0
    slice_width: float = 20.0
    slice_max_steps: int = 50
    checkpoint_interval: int = 10_000

    def __post_init__(self):
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", self.iterations // 2)
        if self.iterations < 1:
            raise SamplerError("iterations must be positive")
        if self.chains < 1:
            raise SamplerError("chains must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise SamplerError("burn_in must satisfy 0 <= burn_in < iterations")
        if not 1 <= self.retained_per_chain <= self.iterations - self.burn_in:
            raise SamplerError(
                "retained_per_chain must be in [1, iterations - burn_in]"
            )
        if not self.slice_width > 0:
            raise SamplerError("slice_width must be positive")
        if self.slice_max_steps < 1:
            raise SamplerError("slice_max_steps must be positive")
        if self.checkpoint_interval < 1:
            raise SamplerError("checkpoint_interval must be positive")
        if not -(2**63) <= self.seed < 2**64:
            raise SamplerError("seed must fit in 64 bits")

    @property
    def thin_stride(self) -> int:
        return (self.iterations - self.burn_in) // self.retained_per_chain

    def retained_iterations(self) -> np.ndarray:
        """Ascending 1-based iteration numbers of the retained draws."""
        s = self.thin_stride
        return (self.iterations - s * np.arange(self.retained_per_chain))[::-1].copy()

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "chains": self.chains,
            "burn_in": self.burn_in,
            "retained_per_chain": self.retained_per_chain,
            "seed": self.seed,
            "slice_width": self.slice_width,
            "slice_max_steps": self.slice_max_steps,
            "checkpoint_interval": self.checkpoint_interval,
        }


# ---------------------------------------------------------------------------
# Slice sampling
# ---------------------------------------------------------------------------


def slice_sample(logdensity, current, width, rng, max_steps=50):
    """One stepping-out-and-shrinkage slice draw from a univariate density.

    If stepping out exhausts ``max_steps`` expansions on either side, the
    width is doubled once and the whole procedure retried; a second
    exhaustion raises :class:`SliceFailureError`. Never returns a point of
    zero density.
    """
    f0 = logdensity(current)
    if not math.isfinite(f0):
        raise SliceFailureError("slice sampler started at a zero-density point")
    for attempt in range(2):
        w = width * (2.0**attempt)
        logy = f0 + math.log(rng.random())
        lo = current - w * rng.random()
        hi = lo + w
        ok = True
        steps = 0
        while logdensity(lo) > logy:
            lo -= w
            steps += 1
            if steps >= max_steps:
                ok = False
                break
        if ok:
            steps = 0
            while logdensity(hi) > logy:
                hi += w
                steps += 1
                if steps >= max_steps:
                    ok = False
                    break
        if not ok:
            continue
        while True:
            x1 = lo + rng.random() * (hi - lo)
            if logdensity(x1) >= logy:
                return x1
            if x1 < current:
                lo = x1
            else:
                hi = x1
            if hi - lo <= 1e-12 * (abs(current) + 1e-12):
                # Interval shrunk to the current point (always acceptable).
                return current
    raise SliceFailureError(
        f"stepping out exhausted {max_steps} steps even after doubling the width"
    )


def _slice_positive(is_gamma, x0, p1, p2, sa, sb, tl, zrow, wrow, lo0, hi1, width, rng, max_steps):
    """:func:`slice_sample` specialised to the positive components (P with a
    gamma prior, R with a log-normal prior), inlined for the innermost loop.

    These nodes are not conjugate, so every density evaluation assembles the
    log conditional directly from the Gaussian terms of the windows covering
    the month (``zrow[lo0:hi1]`` are the current window residuals, ``wrow``
    the observed-window mask); only conjugate nodes get collapsed sufficient
    statistics. A candidate value ``v`` shifts each covering window's
    residual by ``v - x0``. The source-observation terms are Gaussian in the
    node and independent of the window design, so they enter through their
    precision-weighted sums ``sa``/``sb``.

    gamma prior:      (p1-1)·log v - p2·v - tl/2·Σ (z_j-(v-x0))² - sa/2·v² + sb·v
    log-normal prior: -log v - p2/2·(log v-p1)² - tl/2·Σ (z_j-(v-x0))² - sa/2·v² + sb·v
    """
    log = math.log
    rand = rng.random
    htl = 0.5 * tl
    hsa = 0.5 * sa
    hp = 0.5 * p2
    g1 = p1 - 1.0
    if x0 <= 0.0:
        f0 = _NEG_INF
    else:
        ss = 0.0
        for j in range(lo0, hi1):
            if wrow[j]:
                r = zrow[j]
                ss += r * r
        if is_gamma:
            f0 = g1 * log(x0) - p2 * x0 - htl * ss - hsa * x0 * x0 + sb * x0
        else:
            lv = log(x0)
            f0 = -lv - hp * (lv - p1) ** 2 - htl * ss - hsa * x0 * x0 + sb * x0
    if not math.isfinite(f0):
        raise SliceFailureError("slice sampler started at a zero-density point")
    for attempt in range(2):
        w = width * (2.0**attempt)
        logy = f0 + log(rand())
        lo = x0 - w * rand()
        hi = lo + w
        ok = True
        steps = 0
        while True:
            if lo <= 0.0:
                fl = _NEG_INF
            else:
                d = lo - x0
                ss = 0.0
                for j in range(lo0, hi1):
                    if wrow[j]:
                        r = zrow[j] - d
                        ss += r * r
                if is_gamma:
                    fl = g1 * log(lo) - p2 * lo - htl * ss - hsa * lo * lo + sb * lo
                else:
                    lv = log(lo)
                    fl = -lv - hp * (lv - p1) ** 2 - htl * ss - hsa * lo * lo + sb * lo
            if fl <= logy:
                break
            lo -= w
            steps += 1
            if steps >= max_steps:
                ok = False
                break
        if ok:
            steps = 0
            while True:
                if hi <= 0.0:
                    fh = _NEG_INF
                else:
                    d = hi - x0
                    ss = 0.0
                    for j in range(lo0, hi1):
                        if wrow[j]:
                            r = zrow[j] - d
                            ss += r * r
                    if is_gamma:
                        fh = g1 * log(hi) - p2 * hi - htl * ss - hsa * hi * hi + sb * hi
                    else:
                        lv = log(hi)
                        fh = -lv - hp * (lv - p1) ** 2 - htl * ss - hsa * hi * hi + sb * hi
                if fh <= logy:
                    break
                hi += w
                steps += 1
                if steps >= max_steps:
                    ok = False
                    break
        if not ok:
            continue
        while True:
            x1 = lo + rand() * (hi - lo)
            if x1 <= 0.0:
                f1 = _NEG_INF
            else:
                d = x1 - x0
                ss = 0.0
                for j in range(lo0, hi1):
                    if wrow[j]:
                        r = zrow[j] - d
                        ss += r * r
                if is_gamma:
                    f1 = g1 * log(x1) - p2 * x1 - htl * ss - hsa * x1 * x1 + sb * x1
                else:
                    lv = log(x1)
                    f1 = -lv - hp * (lv - p1) ** 2 - htl * ss - hsa * x1 * x1 + sb * x1
            if f1 >= logy:
                return x1
            if x1 < x0:
                lo = x1
            else:
                hi = x1
            if hi - lo <= 1e-12 * (abs(x0) + 1e-12):
                return x0
    raise SliceFailureError(
        f"stepping out exhausted {max_steps} steps even after doubling the width"
    )


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _chain_rng(seed: int, chain_index: int) -> np.random.Generator:
    child = np.random.SeedSequence(seed).spawn(chain_index + 1)[chain_index]
    return np.random.Generator(np.random.PCG64(child))


def _init_from_rng(net: Network, chain_index: int, rng: np.random.Generator) -> LatentState:
    state = net.new_state()
    if net.kind == "generic":
        for name, (family, a, b) in net.gen_prior.items():
            slot = net.nodes[name].slot
            state.vector[slot] = a if family == "normal" else a / b
        if chain_index > 0:
            for name, (family, _, _) in net.gen_prior.items():
                if family == "normal":
                    state.vector[net.nodes[name].slot] *= rng.uniform(0.9, 1.1)
        return state
    theta = state.theta
    for ci, comp in enumerate(COMPONENTS):
        a = net.prior_a[:, ci, :]
        b = net.prior_b[:, ci, :]
        if comp == "P":
            theta[:, ci, :] = a / b
        elif comp == "R":
            theta[:, ci, :] = np.exp(a)
        else:
            theta[:, ci, :] = a
    # Process errors and biases start at zero (their layout slots already
    # are); precisions at their prior means.
    a0, b0 = cond.OBS_PRECISION_PRIOR
    state.tau_obs[:] = a0 / b0
    a0, b0 = cond.DH_PRECISION_PRIOR
    state.tau_dh[:] = a0 / b0
    a0, b0 = cond.HIER_PRECISION_PRIOR
    if state.tau_eps is not None:
        state.tau_eps[:] = a0 / b0
    if state.tau_eta is not None:
        state.tau_eta[:] = a0 / b0
    if chain_index > 0:
        theta *= rng.uniform(0.9, 1.1, size=theta.shape)
    return state


def init_state(net: Network, chain_index: int, seed: int) -> LatentState:
    """Deterministic chain start: component nodes at prior means (gamma:
    shape/rate; log-normal: exp of the log mean), errors and biases at zero,
    precisions at prior means; chains beyond the first jitter component
    nodes multiplicatively by factors in [0.9, 1.1]."""
    return _init_from_rng(net, chain_index, _chain_rng(seed, chain_index))


# ---------------------------------------------------------------------------
# One sweep
# ---------------------------------------------------------------------------


def _scan_bookkeeping(net, cache):
    """Per-lake mutable window residuals for a sequential per-month scan.

    Returns (z, wm, nw): ``z[li][j]`` is the masked residual y_j - S_j of
    window j (0.0 where the window is unobserved and pinned there by the
    mask list ``wm``), ``nw[li][t]`` the number of observed windows
    containing month t. Each node draw reads the residuals of exactly the
    windows containing its month and patches them in place afterwards, so
    cost per node grows with the window overlap of the design.
    """
    z = [
        ((net.ydh0[li] - cache.S[li]) * net.fmdh[li]).tolist()
        for li in range(net.L)
    ]
    wm = [net.fmdh[li].astype(bool).tolist() for li in range(net.L)]
    nw = [net.nwin[li].tolist() for li in range(net.L)]
    return z, wm, nw


def _update_theta_scan(net, state, cache, entry, rng, width, max_steps):
    """Time-major scan of every balance component of every lake.

    Months are visited in order (window coupling forbids independent
    blocks); within a month, conjugate-normal components are drawn exactly
    and the positive components (P gamma, R log-normal) are slice sampled,
    both against the residuals of the windows containing that month. The
    hot state lives in plain lists for the duration of the scan and is
    written back at the end."""
    T = net.T
    L = net.L
    sqrt = math.sqrt
    normal = rng.standard_normal
    z, wm, nw = _scan_bookkeeping(net, cache)
    win_lo = net.win_lo.tolist()
    win_hi = net.win_hi.tolist()
    tau = [float(state.tau_dh[li]) for li in range(L)]
    sign = net.sign.tolist()
    th = state.theta.tolist()  # [li][ci][t]
    bl = cache.b.tolist()
    SA = cache.SA.tolist()
    SB = cache.SB.tolist()
    pa_all = net.prior_a.tolist()
    pb_all = net.prior_b.tolist()
    down = [net.downstream.get(li) for li in range(L)]
    order = THETA_SCAN_ORDER

    for t in range(T):
        lo = win_lo[t]
        hi1 = win_hi[t] + 1
        for li in range(L):
            zli = z[li]
            wmli = wm[li]
            s1 = 0.0
            for j in range(lo, hi1):
                s1 += zli[j]
            nwt = nw[li][t]
            tl = tau[li]
            thl = th[li]
            sal = SA[li]
            sbl = SB[li]
            pal = pa_all[li]
            pbl = pb_all[li]
            dn = down[li]
            if dn is not None:
                dli, fac = dn
                zd = z[dli]
                wmd = wm[dli]
                s1d = 0.0
                for j in range(lo, hi1):
                    s1d += zd[j]
                nwd = nw[dli][t]
                td = tau[dli]
            for ci in order:
                a = sign[ci]
                x0 = thl[ci][t]
                coupled = ci == 3 and dn is not None
                if ci == 0 or ci == 2:  # P (gamma) or R (log-normal): slice
                    try:
                        xn = _slice_positive(
                            ci == 0, x0, pal[ci][t], pbl[ci][t],
                            sal[ci][t], sbl[ci][t], tl, zli, wmli, lo, hi1,
                            width, rng, max_steps,
                        )
                    except SliceFailureError as exc:
                        raise SliceFailureError(
                            str(exc), f"{COMPONENTS[ci]}_{net.lakes[li]}_{t + 1}"
                        ) from exc
                else:  # E, Q, D: conjugate normal
                    qa = tl * nwt + sal[ci][t]
                    qb = tl * (a * s1 + nwt * x0) + sbl[ci][t]
                    if coupled:
                        qa += td * fac * fac * nwd
                        qb += td * (fac * s1d + fac * fac * nwd * x0)
                    pbt = pbl[ci][t]
                    A = qa + pbt
                    B = qb + pal[ci][t] * pbt
                    xn = B / A + normal() / sqrt(A)
                delta = xn - x0
                if delta != 0.0:
                    thl[ci][t] = xn
                    bl[li][t] += a * delta
                    ad = a * delta
                    for j in range(lo, hi1):
                        if wmli[j]:
                            zli[j] -= ad
                    s1 -= ad * nwt
                    if coupled:
                        fd = fac * delta
                        bl[dli][t] += fd
                        for j in range(lo, hi1):
                            if wmd[j]:
                                zd[j] -= fd
                        s1d -= fd * nwd
    state.theta[:] = th
    cache.b[:] = bl
    for li in range(L):
        cache.refresh_S(li)


def _update_eps_scan(net, state, cache, entry, rng):
    """Time-major scan of the hierarchical monthly process errors (all
    lakes), with the same per-window residual bookkeeping as the component
    scan."""
    T = net.T
    L = net.L
    sqrt = math.sqrt
    z, wm, nw = _scan_bookkeeping(net, cache)
    win_lo = net.win_lo.tolist()
    win_hi = net.win_hi.tolist()
    normal = rng.standard_normal
    tau = [float(state.tau_dh[li]) for li in range(L)]
    cm = net.cmap.tolist()
    eps = state.eps_month.tolist()
    bl = cache.b.tolist()
    seas = state.eps_seas.tolist()
    tse = state.tau_eps.tolist()

    for t in range(T):
        lo = win_lo[t]
        hi1 = win_hi[t] + 1
        c = cm[t]
        for li in range(L):
            zli = z[li]
            wmli = wm[li]
            s1 = 0.0
            for j in range(lo, hi1):
                s1 += zli[j]
            nwt = nw[li][t]
            tl = tau[li]
            x0 = eps[li][t]
            te = tse[li][c]
            A = te + tl * nwt
            B = te * seas[li][c] + tl * (s1 + nwt * x0)
            xn = B / A + normal() / sqrt(A)
            delta = xn - x0
            if delta != 0.0:
                eps[li][t] = xn
                bl[li][t] += delta
                for j in range(lo, hi1):
                    if wmli[j]:
                        zli[j] -= delta
    state.eps_month[:] = eps
    cache.b[:] = bl
    for li in range(L):
        cache.refresh_S(li)


def _update_eps_seas_fixed(net, state, cache, entry, rng):
    li = entry.lakes[0]
    for c in range(12):
        A, B = cond.eps_seas_fixed_stats(net, state, cache, li, c)
        x_new = B / A + rng.standard_normal() / math.sqrt(A)
        delta = x_new - float(state.eps_seas[li, c])
        state.eps_seas[li, c] = x_new
        cache.b[li, net.cal_idx[c]] += delta
        cache.refresh_S(li)


def _update_eps_seas_hier(net, state, rng):
    A, B = cond.eps_seas_hier_stats(net, state)
    state.eps_seas[:] = B / A + rng.standard_normal(A.shape) / np.sqrt(A)


def _update_eta_month(net, state, entry, rng):
    si = entry.source
    A, B = cond.eta_month_stats(net, state, si)
    state.eta_month(si)[:] = B / A + rng.standard_normal(A.shape) / np.sqrt(A)


def _update_eta_seas(net, state, entry, rng):
    si = entry.source
    A, B = cond.eta_seas_stats(net, state, si)
    state.eta_seas[si] = B / A + rng.standard_normal(12) / np.sqrt(A)


def gibbs_step(
    net: Network,
    state: LatentState,
    rng: np.random.Generator,
    slice_width: float = 20.0,
    slice_max_steps: int = 50,
) -> LatentState:
    """One full systematic scan updating every stochastic node once.

    Mutates ``state`` in place and returns it. Derived quantities (balances,
    window sums) are refreshed from the state at sweep start and patched
    incrementally as nodes change.
    """
    if net.kind == "generic":
        for entry in net.plan:
            c = full_conditional(net, entry.name, state)
            state.vector[net.nodes[entry.name].slot] = c.draw(rng)
        return state

    cache = cond.SweepCache(net, state)
    for entry in net.plan:
        kind = entry.kind
        if kind == "theta_scan":
            _update_theta_scan(net, state, cache, entry, rng, slice_width, slice_max_steps)
        elif kind == "eps_scan":
            _update_eps_scan(net, state, cache, entry, rng)
        elif kind == "eps_seas_fixed":
            _update_eps_seas_fixed(net, state, cache, entry, rng)
        elif kind == "eps_seas_hier":
            _update_eps_seas_hier(net, state, rng)
        elif kind == "eta_month":
            _update_eta_month(net, state, entry, rng)
        elif kind == "eta_seas":
            _update_eta_seas(net, state, entry, rng)
        elif kind == "tau_dh":
            for li in range(net.L):
                g = cond.tau_dh_stats(net, state, cache, li)
                state.tau_dh[li] = g.draw(rng)
        elif kind == "tau_obs":
            for si in range(net.S):
                g = cond.tau_obs_stats(net, state, si)
                state.tau_obs[si] = g.draw(rng)
        elif kind == "tau_eps":
            shape, rate = cond.tau_eps_stats(net, state)
            state.tau_eps[:] = rng.gamma(shape, 1.0 / rate)
        elif kind == "tau_eta":
            for src in net.sources:
                shape, rate = cond.tau_eta_stats(net, state, src.si)
                state.tau_eta[src.si] = rng.gamma(shape, 1.0 / rate)
        else:
            raise SamplerError(f"unknown update entry {kind!r}")
    return state


# ---------------------------------------------------------------------------
# Sample store
# ---------------------------------------------------------------------------


@dataclass
class SampleStore:
    """Retained, thinned draws for every monitored parameter across chains.

    ``draws`` has shape (chains, retained, parameters) with columns in
    ``names`` order. Derived series (channel inflows, which are a fixed
    multiple of the upstream outflow or identically zero) are exposed
    through :meth:`matrix` without being stored.
    """

    names: list[str]
    draws: np.ndarray
    iterations: np.ndarray
    settings: SamplerSettings
    model_id: str
    durations: list[float] = field(default_factory=list)
    total_duration: float = 0.0
    failed: bool = False
    abort_reason: str | None = None
    derived: dict[str, tuple[float, str | None]] = field(default_factory=dict)
    trajectory: dict | None = None

    def __post_init__(self):
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_retained(self) -> int:
        return self.draws.shape[1]

    def parameter_names(self) -> list[str]:
        return list(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._index or name in self.derived

    def matrix(self, name: str) -> np.ndarray:
        """(chains, retained) draw matrix for one parameter (or derived series)."""
        ix = self._index.get(name)
        if ix is not None:
            return self.draws[:, :, ix]
        spec = self.derived.get(name)
        if spec is None:
            raise KeyError(f"parameter {name!r} not monitored")
        factor, base = spec
        if base is None:
            return np.zeros(self.draws.shape[:2])
        return factor * self.matrix(base)

    def flat(self, name: str) -> np.ndarray:
        """All chains concatenated in chain order."""
        return self.matrix(name).reshape(-1)

    # -- persistence --------------------------------------------------------

    def save(self, out_dir, force: bool = False) -> None:
        """Persist as a directory: deterministic ``manifest.json``, one CSV
        per parameter (``chain,draw_index,value``), and wall-clock timings
        in ``timing.json`` (the only file expected to differ between
        identical runs)."""
        out = Path(out_dir)
        manifest_path = out / "manifest.json"
        if manifest_path.exists() and not force:
            raise SamplerError(
                f"{out} already holds a store; pass force to overwrite"
            )
        draws_dir = out / "draws"
        if draws_dir.exists() and force:
            for old in draws_dir.glob("*.csv"):
                old.unlink()
        draws_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "schema_version": STORE_SCHEMA_VERSION,
            "model": self.model_id,
            "settings": self.settings.as_dict(),
            "parameters": self.names,
            "derived": {k: [v[0], v[1]] for k, v in sorted(self.derived.items())},
            "chains": int(self.draws.shape[0]),
            "retained_per_chain": int(self.draws.shape[1]),
            "first_retained_iteration": int(self.iterations[0]),
            "last_retained_iteration": int(self.iterations[-1]),
            "thin_stride": self.settings.thin_stride,
            "failed": self.failed,
            "abort_reason": self.abort_reason,
        }
        manifest_path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
        C, R, _ = self.draws.shape
        chain_col = np.repeat(np.arange(C), R)
        draw_col = np.tile(np.arange(R), C)
        for ix, name in enumerate(self.names):
            col = self.draws[:, :, ix].reshape(-1).tolist()
            lines = ["chain,draw_index,value"]
            lines.extend(
                f"{chain_col[k]},{draw_col[k]},{col[k]!r}" for k in range(C * R)
            )
            (draws_dir / f"{name}.csv").write_text("\n".join(lines) + "\n")
        (out / "timing.json").write_text(
            json.dumps(
                {
                    "chain_seconds": self.durations,
                    "total_seconds": self.total_duration,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )

    @classmethod
    def load(cls, in_dir) -> "SampleStore":
        out = Path(in_dir)
        manifest = json.loads((out / "manifest.json").read_text())
        if manifest["schema_version"] != STORE_SCHEMA_VERSION:
            raise SamplerError(
                f"store schema {manifest['schema_version']} unsupported"
            )
        settings = SamplerSettings(**manifest["settings"])
        names = manifest["parameters"]
        C = manifest["chains"]
        R = manifest["retained_per_chain"]
        draws = np.empty((C, R, len(names)))
        for ix, name in enumerate(names):
            text = (out / "draws" / f"{name}.csv").read_text().splitlines()
            if text[0] != "chain,draw_index,value":
                raise SamplerError(f"bad draw file header for {name!r}")
            vals = np.empty(C * R)
            for k, line in enumerate(text[1:]):
                vals[k] = float(line.rsplit(",", 1)[1])
            draws[:, :, ix] = vals.reshape(C, R)
        durations: list[float] = []
        total = 0.0
        timing = out / "timing.json"
        if timing.exists():
            t = json.loads(timing.read_text())
            durations = t.get("chain_seconds", [])
            total = t.get("total_seconds", 0.0)
        return cls(
            names=names,
            draws=draws,
            iterations=settings.retained_iterations(),
            settings=settings,
            model_id=manifest["model"],
            durations=durations,
            total_duration=total,
            failed=manifest.get("failed", False),
            abort_reason=manifest.get("abort_reason"),
            derived={k: (v[0], v[1]) for k, v in manifest.get("derived", {}).items()},
        )


def _derived_inflows(net: Network, monitored: set[str]) -> dict:
    """Inflow series as fixed multiples of monitored upstream outflows."""
    derived: dict[str, tuple[float, str | None]] = {}
    if net.kind != "l2swbm":
        return derived
    for li, lake in enumerate(net.lakes):
        up = net.upstream.get(li)
        for t in range(net.T):
            name = f"I_{lake}_{t + 1}"
            if up is None:
                derived[name] = (0.0, None)
            else:
                uli, fac = up
                base = f"Q_{net.lakes[uli]}_{t + 1}"
                if base in monitored:
                    derived[name] = (fac, base)
    return derived


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------


def _fingerprint(net: Network, settings: SamplerSettings, slots: np.ndarray) -> str:
    model = getattr(net, "config", None)
    model_id = model.id if model is not None else "generic"
    return json.dumps(
        {
            "model": model_id,
            "n_slots": net.n_slots,
            "monitored": int(slots.size),
            "settings": settings.as_dict(),
        },
        sort_keys=True,
    )


def _run_chain(
    net,
    settings,
    chain_index,
    slots,
    traj_stride,
    checkpoint_path,
    resume,
    stop_after,
    fingerprint,
):
    rng = _chain_rng(settings.seed, chain_index)
    state = _init_from_rng(net, chain_index, rng)
    retained = settings.retained_iterations()
    R = len(retained)
    draws = np.full((R, slots.size), np.nan)
    traj: list[np.ndarray] = []
    pos = 0
    start_iter = 0
    elapsed = 0.0

    if resume and checkpoint_path is not None and checkpoint_path.exists():
        with open(checkpoint_path, "rb") as fh:
            ck = pickle.load(fh)
        if ck["version"] != CHECKPOINT_VERSION:
            raise SamplerError(f"checkpoint version {ck['version']} unsupported")
        if ck["fingerprint"] != fingerprint:
            raise SamplerError(
                "checkpoint belongs to a different model/settings combination"
            )
        state.vector[:] = ck["state"]
        rng.bit_generator.state = ck["rng_state"]
        pos = ck["pos"]
        draws[:pos] = ck["draws"]
        traj = [np.asarray(v) for v in ck["trajectory"]]
        start_iter = ck["iteration"]
        elapsed = ck["elapsed"]

    width = settings.slice_width
    max_steps = settings.slice_max_steps
    interval = settings.checkpoint_interval
    t0 = time.perf_counter()
    status = None  # None = complete, ("stopped", it) or ("aborted", reason)
    try:
        for it in range(start_iter + 1, settings.iterations + 1):
            gibbs_step(net, state, rng, width, max_steps)
            if traj_stride and it % traj_stride == 0:
                traj.append(state.vector[slots].copy())
            if pos < R and it == retained[pos]:
                draws[pos] = state.vector[slots]
                pos += 1
            if checkpoint_path is not None and it % interval == 0:
                _write_checkpoint(
                    checkpoint_path,
                    fingerprint,
                    it,
                    state,
                    rng,
                    pos,
                    draws,
                    traj,
                    elapsed + time.perf_counter() - t0,
                )
            if stop_after is not None and it >= stop_after:
                status = ("stopped", f"stopped at iteration {it}")
                break
    except SliceFailureError as exc:
        status = ("aborted", str(exc))
    duration = elapsed + time.perf_counter() - t0
    return draws, traj, duration, pos, status


def _write_checkpoint(path, fingerprint, it, state, rng, pos, draws, traj, elapsed):
    payload = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint,
        "iteration": it,
        "state": state.vector.copy(),
        "rng_state": rng.bit_generator.state,
        "pos": pos,
        "draws": draws[:pos].copy(),
        "trajectory": [v for v in traj],
        "elapsed": elapsed,
    }
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(payload, fh)
    os.replace(tmp, path)


def run(
    net: Network,
    settings: SamplerSettings,
    *,
    monitor=None,
    out_dir=None,
    force: bool = False,
    checkpoint_dir=None,
    resume: bool = False,
    trajectory: bool = False,
    parallel: bool | None = None,
    stop_after: int | None = None,
) -> SampleStore:
    """Run all chains and return the merged store (ordered by chain index).

    ``monitor`` is a sequence of glob patterns over node names (default: the
    model config's patterns, or everything). With ``trajectory=True`` the
    run buffers draws so that convergence can later be evaluated at every
    ``checkpoint_interval`` iterations (first half discarded, latter half
    thinned to 1,000 per chain). ``stop_after`` halts chains early, leaving
    a resumable partial store (flagged failed); with ``checkpoint_dir`` and
    ``resume=True`` a later call continues from the restart files.

    Chains may execute concurrently (``parallel=True``, or the
    ``L2SWBM_THREADS`` environment variable > 1); results are independent of
    scheduling because each chain owns a spawned RNG stream and private
    state.
    """
    if monitor is None:
        cfg = getattr(net, "config", None)
        monitor = cfg.monitored if cfg is not None else ("*",)
    names = [
        n for n in net.stochastic_names if any(fnmatchcase(n, p) for p in monitor)
    ]
    if not names:
        raise SamplerError(f"no stochastic node matches monitor patterns {monitor}")
    slots = np.array([net.nodes[n].slot for n in names])

    traj_stride = 0
    if trajectory:
        interval = settings.checkpoint_interval
        traj_stride = interval // 2000 if interval % 2000 == 0 else 1
        snaps = settings.iterations // max(traj_stride, 1)
        est = settings.chains * snaps * slots.size * 8
        if est > 2_000_000_000:
            raise SamplerError(
                "trajectory buffer would exceed 2 GB; restrict monitor patterns"
            )

    fingerprint = _fingerprint(net, settings, slots)
    ck_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ck_dir is not None:
        ck_dir.mkdir(parents=True, exist_ok=True)

    def job(i):
        path = ck_dir / f"chain_{i:02d}.ckpt" if ck_dir is not None else None
        return _run_chain(
            net, settings, i, slots, traj_stride, path, resume, stop_after, fingerprint
        )

    if parallel is None:
        parallel = int(os.environ.get("L2SWBM_THREADS", "1")) > 1
    wall0 = time.perf_counter()
    if parallel and settings.chains > 1:
        with ThreadPoolExecutor(max_workers=settings.chains) as pool:
            results = list(pool.map(job, range(settings.chains)))
    else:
        results = [job(i) for i in range(settings.chains)]
    wall = time.perf_counter() - wall0

    retained = settings.retained_iterations()
    R = len(retained)
    draws = np.stack([r[0] for r in results])
    durations = [r[2] for r in results]
    failed = False
    reason = None
    for i, r in enumerate(results):
        if r[4] is not None:
            failed = True
            reason = f"chain {i}: {r[4][1]}"
        elif r[3] != R:
            failed = True
            reason = f"chain {i} retained only {r[3]} of {R} draws"

    traj_block = None
    if trajectory:
        n_snap = min(len(r[1]) for r in results)
        traj_draws = np.stack([np.array(r[1][:n_snap]) for r in results])
        traj_block = {
            "stride": traj_stride,
            "iterations": traj_stride * np.arange(1, n_snap + 1),
            "draws": traj_draws,
            "interval": settings.checkpoint_interval,
            "completed": settings.iterations if not failed else (stop_after or 0),
        }

    cfg = getattr(net, "config", None)
    store = SampleStore(
        names=names,
        draws=draws,
        iterations=retained,
        settings=settings,
        model_id=cfg.id if cfg is not None else "generic",
        durations=durations,
        total_duration=wall,
        failed=failed,
        abort_reason=reason,
        derived=_derived_inflows(net, set(names)),
        trajectory=traj_block,
    )
    if out_dir is not None:
        store.save(out_dir, force=force)
    return store
