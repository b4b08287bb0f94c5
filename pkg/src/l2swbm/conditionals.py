"""Exact full-conditional kernels for the water-balance network.

Every conditional in the model is either conjugate normal (balance
components with normal priors, process errors, biases, hierarchy means),
conjugate gamma (precisions), or log-concave in one coordinate with a
gamma/log-normal prior times a normal quadratic (precipitation, runoff),
which the sampler handles by slice sampling.

The same sufficient-statistic functions serve two callers: the node-level
oracle path (``network.full_conditional`` on a single node, used by tests
against grid integration of the joint) and the sampler's grouped sweeps
(vector draws over all months a window-stride apart, which never share a
window observation and are therefore conditionally independent).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "UPSTREAM_ROUTING",
    "DH_PRECISION_PRIOR",
    "OBS_PRECISION_PRIOR",
    "HIER_PRECISION_PRIOR",
    "SEASONAL_MEAN_PRECISION",
    "CONSTRAINED_BIAS_PRECISION",
    "NormalCond",
    "GammaCond",
    "SliceCond",
    "SweepCache",
    "source_bias_vector",
    "node_conditional",
]

#: Fraction of a lake's outflow entering the next lake downstream, expressed
#: over the downstream surface area. Fixed property of the channel.
UPSTREAM_ROUTING = 0.7

#: (shape, rate) hyper-priors on precisions, and seasonal-mean precisions.
DH_PRECISION_PRIOR = (0.01, 0.01)
OBS_PRECISION_PRIOR = (0.1, 0.1)
HIER_PRECISION_PRIOR = (0.05, 0.05)
SEASONAL_MEAN_PRECISION = 0.01
CONSTRAINED_BIAS_PRECISION = 0.25

_LOG_2PI = math.log(2.0 * math.pi)

# Component indices in the canonical (P, E, R, Q, D) order.
_P, _E, _R, _Q, _D = range(5)


@dataclass
class NormalCond:
    """Normal full conditional, mean/precision parameterised."""

    mean: float
    precision: float

    def draw(self, rng: np.random.Generator) -> float:
        return self.mean + rng.standard_normal() / math.sqrt(self.precision)

    def logpdf(self, x):
        return 0.5 * (np.log(self.precision) - _LOG_2PI) - 0.5 * self.precision * (
            np.asarray(x, dtype=float) - self.mean
        ) ** 2


@dataclass
class GammaCond:
    """Gamma full conditional, shape/rate parameterised."""

    shape: float
    rate: float

    def draw(self, rng: np.random.Generator) -> float:
        return rng.gamma(self.shape, 1.0 / self.rate)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (
                self.shape * math.log(self.rate)
                - gammaln(self.shape)
                + (self.shape - 1.0) * np.log(x)
                - self.rate * x
            )
        return np.where(x > 0.0, out, -np.inf) if out.ndim else (
            float(out) if x > 0.0 else -np.inf
        )


@dataclass
class SliceCond:
    """Non-conjugate positive-support conditional handled by slice sampling.

    ``logpdf`` is the unnormalised log density: a gamma or log-normal prior
    term plus the likelihood quadratic ``-qa/2 x^2 + qb x``. ``kind`` is
    ``"gamma"`` (p1=shape, p2=rate) or ``"lognormal"`` (p1=log-mean,
    p2=log-precision). ``width`` is the recommended initial slice width.
    """

    kind: str
    p1: float
    p2: float
    qa: float
    qb: float
    width: float = 20.0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        # np.maximum keeps np.log quiet off-support without an errstate
        # context (this is the innermost loop of the whole sampler); the
        # final where() masks those lanes to -inf regardless.
        logx = np.log(np.maximum(x, 1e-300))
        if self.kind == "gamma":
            core = (self.p1 - 1.0) * logx - self.p2 * x
        elif self.kind == "lognormal":
            core = -logx - 0.5 * self.p2 * (logx - self.p1) ** 2
        else:
            raise ValueError(f"unknown slice kind {self.kind!r}")
        out = np.where(x > 0.0, core - 0.5 * self.qa * x * x + self.qb * x, -np.inf)
        return float(out) if scalar else out


class SweepCache:
    """Derived quantities refreshed at sweep start and patched incrementally.

    ``b`` is the (L, T) matrix of monthly balances implied by the current
    state, ``S`` the (L, J) window sums. ``SA``/``SB`` aggregate the component
    observation terms of each balance component's conditional:

        SA[l, c, t] = sum_n tau_n * 1[observed]
        SB[l, c, t] = sum_n tau_n * (y_n,t - bias_n,t) * 1[observed]

    They are valid for the whole component phase of a sweep because biases
    and observation precisions are updated only afterwards.
    """

    __slots__ = ("net", "b", "S", "SA", "SB")

    def __init__(self, net, state, obs_stats: bool = True):
        self.net = net
        theta = state.theta
        b = np.tensordot(net.sign, theta, axes=([0], [1]))  # (L, T)
        for li, (dli, fac) in net.downstream.items():
            b[dli] += fac * theta[li, _Q]
        if net.eps_mode == "hier":
            b = b + state.eps_month
        elif net.eps_mode == "fixed":
            b = b + state.eps_seas[:, net.cmap]
        self.b = np.ascontiguousarray(b)
        self.S = self._window_sums_all()
        if obs_stats:
            SA = np.zeros((net.L, 5, net.T))
            SB = np.zeros((net.L, 5, net.T))
            for src in net.sources:
                tau = float(state.tau_obs[src.si])
                bias = source_bias_vector(net, state, src.si)
                SA[src.lake, src.comp] += tau * src.fmask
                SB[src.lake, src.comp] += tau * src.fmask * (src.y0 - bias)
            self.SA, self.SB = SA, SB
        else:
            self.SA = self.SB = None

    def _window_sums_all(self) -> np.ndarray:
        net = self.net
        if net.window == "cumulative":
            return np.cumsum(self.b, axis=1)
        w = int(net.window)
        cs = np.concatenate(
            [np.zeros((net.L, 1)), np.cumsum(self.b, axis=1)], axis=1
        )
        return cs[:, w:] - cs[:, : net.J]

    def refresh_S(self, li: int) -> None:
        net = self.net
        if net.window == "cumulative":
            self.S[li] = np.cumsum(self.b[li])
        else:
            w = int(net.window)
            cs = np.concatenate([[0.0], np.cumsum(self.b[li])])
            self.S[li] = cs[w:] - cs[: net.J]

def inflow_from_state(net, state, li: int) -> np.ndarray:
    """Channel inflow series for one lake (zeros for the chain head)."""
    up = getattr(net, "upstream", {}).get(li)
    if up is None:
        return np.zeros(net.T)
    uli, fac = up
    return fac * state.theta[uli, _Q]


def source_bias_vector(net, state, si: int) -> np.ndarray:
    """Systematic error of one source at every month (zeros where unused)."""
    src = net.sources[si]
    if net.bias_mode == "hier":
        v = np.zeros(net.T)
        v[src.unmasked_idx] = state.eta_month(si)
        return v
    return state.eta_seas[si][net.cmap]


def masked_residual(net, cache: SweepCache, li: int) -> np.ndarray:
    """(y_dh - window sum) with masked windows zeroed, for one lake."""
    return (net.ydh0[li] - cache.S[li]) * net.fmdh[li]


def window_residual_sums(net, cache: SweepCache, li: int, idx) -> np.ndarray:
    """For each month in ``idx``: sum of masked residuals over the windows
    that contain it (contiguous window range win_lo..win_hi)."""
    z = masked_residual(net, cache, li)
    zc = np.concatenate([[0.0], np.cumsum(z)])
    return zc[net.win_hi[idx] + 1] - zc[net.win_lo[idx]]


# ---------------------------------------------------------------------------
# Sufficient statistics per node class
# ---------------------------------------------------------------------------


def theta_quadratic(net, state, cache: SweepCache, li: int, ci: int, idx):
    """Likelihood quadratic (qa, qb) for balance components at months ``idx``:
    the conditional is proportional to prior(x) * exp(-qa/2 x^2 + qb x)."""
    a = float(net.sign[ci])
    tau = float(state.tau_dh[li])
    nwin = net.nwin[li, idx]
    resw = window_residual_sums(net, cache, li, idx)
    x = state.theta[li, ci, idx]
    qa = tau * nwin + cache.SA[li, ci, idx]
    qb = tau * (a * resw + nwin * x) + cache.SB[li, ci, idx]
    if ci == _Q:
        down = net.downstream.get(li)
        if down is not None:
            dli, fac = down
            taud = float(state.tau_dh[dli])
            nwd = net.nwin[dli, idx]
            resd = window_residual_sums(net, cache, dli, idx)
            qa = qa + taud * fac * fac * nwd
            qb = qb + taud * (fac * resd + fac * fac * nwd * x)
    return qa, qb


def theta_conditional_arrays(net, state, cache: SweepCache, li: int, ci: int, idx):
    """Dispatchable conditional parameters for a month group of one component.

    Returns ``("normal", A, B)`` for conjugate components (mean B/A,
    precision A) or ``("slice", kind, p1, p2, qa, qb)`` for positive
    components where the prior is non-conjugate.
    """
    qa, qb = theta_quadratic(net, state, cache, li, ci, idx)
    pa = net.prior_a[li, ci, idx]
    pb = net.prior_b[li, ci, idx]
    if ci == _P:
        return ("slice", "gamma", pa, pb, qa, qb)
    if ci == _R:
        return ("slice", "lognormal", pa, pb, qa, qb)
    return ("normal", qa + pb, qb + pa * pb)


def eps_month_stats(net, state, cache: SweepCache, li: int, idx):
    """(A, B) for hierarchical monthly process errors at months ``idx``."""
    tau = float(state.tau_dh[li])
    nwin = net.nwin[li, idx]
    resw = window_residual_sums(net, cache, li, idx)
    x = state.eps_month[li, idx]
    cal = net.cmap[idx]
    tse = state.tau_eps[li, cal]
    A = tse + tau * nwin
    B = tse * state.eps_seas[li, cal] + tau * (resw + nwin * x)
    return A, B


def eps_seas_fixed_stats(net, state, cache: SweepCache, li: int, c: int):
    """(A, B) for one seasonal process error when it enters balances directly.

    The coefficient of eps_c in window j is the window's multiplicity of
    calendar month c, so the quadratic uses mask-weighted multiplicity sums.
    """
    m = net.wincal[:, c]
    r = masked_residual(net, cache, li)
    s2 = float(net.summ2[li, c])
    tau = float(state.tau_dh[li])
    x = float(state.eps_seas[li, c])
    A = SEASONAL_MEAN_PRECISION + tau * s2
    B = tau * (float(np.dot(m, r)) + s2 * x)
    return A, B


def eps_seas_hier_stats(net, state):
    """(A, B) arrays (L, 12) for seasonal means over monthly process errors."""
    cnt = net.cnt_cal
    A = SEASONAL_MEAN_PRECISION + state.tau_eps * cnt
    sums = state.eps_month @ net.calmat.T  # (L, 12)
    B = state.tau_eps * sums
    return A, B


def eta_month_stats(net, state, si: int):
    """(A, B) arrays over a source's unmasked months for monthly biases."""
    src = net.sources[si]
    cal = src.cal_unmasked
    tau_e = state.tau_eta[si, cal]
    tau_s = float(state.tau_obs[si])
    resid = src.y0[src.unmasked_idx] - state.theta[src.lake, src.comp, src.unmasked_idx]
    A = tau_e + tau_s
    B = tau_e * state.eta_seas[si, cal] + tau_s * resid
    return A, B


def eta_seas_stats(net, state, si: int):
    """(A, B) arrays (12,) for a source's seasonal bias terms."""
    src = net.sources[si]
    tau0 = src.bias_prior_precision
    if net.bias_mode == "hier":
        tau_e = state.tau_eta[si]
        A = tau0 + tau_e * src.cnt_cal
        sums = np.bincount(src.cal_unmasked, weights=state.eta_month(si), minlength=12)
        B = tau_e * sums
        return A, B
    tau_s = float(state.tau_obs[si])
    resid = src.y0[src.unmasked_idx] - state.theta[src.lake, src.comp, src.unmasked_idx]
    A = tau0 + tau_s * src.cnt_cal
    B = tau_s * np.bincount(src.cal_unmasked, weights=resid, minlength=12)
    return A, B


def tau_dh_stats(net, state, cache: SweepCache, li: int) -> GammaCond:
    d = net.ydh0[li] - cache.S[li]
    sse = float(np.dot(d * net.fmdh[li], d))
    a0, b0 = DH_PRECISION_PRIOR
    return GammaCond(a0 + 0.5 * float(net.ndh[li]), b0 + 0.5 * sse)


def tau_obs_stats(net, state, si: int) -> GammaCond:
    src = net.sources[si]
    idx = src.unmasked_idx
    bias = (
        state.eta_month(si)
        if net.bias_mode == "hier"
        else state.eta_seas[si][src.cal_unmasked]
    )
    d = src.y0[idx] - state.theta[src.lake, src.comp, idx] - bias
    a0, b0 = OBS_PRECISION_PRIOR
    return GammaCond(a0 + 0.5 * len(idx), b0 + 0.5 * float(np.dot(d, d)))


def tau_eps_stats(net, state):
    """(shape, rate) arrays (L, 12) for process-error hierarchy precisions."""
    d = state.eps_month - state.eps_seas[:, net.cmap]
    sse = (d * d) @ net.calmat.T  # (L, 12)
    a0, b0 = HIER_PRECISION_PRIOR
    return a0 + 0.5 * net.cnt_cal, b0 + 0.5 * sse


def tau_eta_stats(net, state, si: int):
    """(shape, rate) arrays (12,) for one source's bias hierarchy precisions."""
    src = net.sources[si]
    d = state.eta_month(si) - state.eta_seas[si][src.cal_unmasked]
    sse = np.bincount(src.cal_unmasked, weights=d * d, minlength=12)
    a0, b0 = HIER_PRECISION_PRIOR
    return a0 + 0.5 * src.cnt_cal, b0 + 0.5 * sse


# ---------------------------------------------------------------------------
# Single-node dispatch (oracle path)
# ---------------------------------------------------------------------------


def node_conditional(net, state, cache: SweepCache, node):
    """Conditional descriptor for one node, using the shared statistics."""
    klass = node.klass
    if klass == "theta":
        idx = np.array([node.t])
        kind = theta_conditional_arrays(net, state, cache, node.lake, node.comp, idx)
        if kind[0] == "normal":
            _, A, B = kind
            return NormalCond(float(B[0]) / float(A[0]), float(A[0]))
        _, family, pa, pb, qa, qb = kind
        return SliceCond(family, float(pa[0]), float(pb[0]), float(qa[0]), float(qb[0]))
    if klass == "eps_month":
        idx = np.array([node.t])
        A, B = eps_month_stats(net, state, cache, node.lake, idx)
        return NormalCond(float(B[0]) / float(A[0]), float(A[0]))
    if klass == "eps_seas":
        if net.eps_mode == "fixed":
            A, B = eps_seas_fixed_stats(net, state, cache, node.lake, node.cal)
            return NormalCond(B / A, A)
        li, c = node.lake, node.cal
        tau = float(state.tau_eps[li, c])
        cnt = float(net.cnt_cal[c])
        s = float(np.sum(state.eps_month[li, net.cal_idx[c]]))
        A = SEASONAL_MEAN_PRECISION + tau * cnt
        return NormalCond(tau * s / A, A)
    if klass == "tau_eps":
        li, c = node.lake, node.cal
        d = state.eps_month[li, net.cal_idx[c]] - float(state.eps_seas[li, c])
        a0, b0 = HIER_PRECISION_PRIOR
        return GammaCond(
            a0 + 0.5 * float(net.cnt_cal[c]), b0 + 0.5 * float(np.dot(d, d))
        )
    if klass == "eta_month":
        src = net.sources[node.source]
        pos = int(np.searchsorted(src.unmasked_idx, node.t))
        A, B = eta_month_stats(net, state, node.source)
        return NormalCond(float(B[pos]) / float(A[pos]), float(A[pos]))
    if klass == "eta_seas":
        A, B = eta_seas_stats(net, state, node.source)
        c = node.cal
        return NormalCond(float(B[c]) / float(A[c]), float(A[c]))
    if klass == "tau_eta":
        shape, rate = tau_eta_stats(net, state, node.source)
        c = node.cal
        return GammaCond(float(shape[c]), float(rate[c]))
    if klass == "tau_obs":
        return tau_obs_stats(net, state, node.source)
    if klass == "tau_dh":
        return tau_dh_stats(net, state, cache, node.lake)
    raise KeyError(f"no conditional for node class {klass!r}")
