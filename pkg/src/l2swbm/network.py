"""Directed graphical model for the monthly lake water balance.

A network couples, per lake and month, five flux components (P precipitation,
E evaporation, R runoff, Q channel outflow, D diversion; all mm over the lake
surface) plus a deterministic channel inflow I, through the balance

    balance(l, t) = P - E + R + I - Q + D + process_error

whose window sums are observed as water-level changes. Component estimates
are observed with per-source precisions and systematic seasonal biases.

The module owns model configuration, graph assembly from aligned data and
fitted priors, the joint log density, and exact per-node full conditionals.
Sampling loops live in :mod:`l2swbm.sampler`; the shared sufficient-statistic
kernels live in :mod:`l2swbm.conditionals`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import conditionals as cond
from .ingest import CUMULATIVE, AlignedTable, delta_h
from .priors import PriorSpec

__all__ = [
    "BuildError",
    "COMPONENTS",
    "UPSTREAM_ROUTING",
    "ModelConfig",
    "parse_model_id",
    "format_model_id",
    "make_config",
    "Node",
    "UpdateEntry",
    "Network",
    "LatentState",
    "build",
    "toy_network",
    "log_joint",
    "full_conditional",
    "observation_loglik",
    "deviance",
    "simulate_observations",
    "expected_node_counts",
    "to_dot",
]

#: Flux components in canonical order; sign is the balance coefficient.
COMPONENTS = ("P", "E", "R", "Q", "D")
SIGN = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
#: Within-month update order: conjugate-normal components first, so their
#: exact draws absorb most of any residual imbalance before the
#: slice-sampled positive components (P, R) have to traverse it.
THETA_SCAN_ORDER = tuple(COMPONENTS.index(c) for c in ("E", "Q", "D", "P", "R"))

# Shared numeric constants live next to the conditional kernels.
UPSTREAM_ROUTING = cond.UPSTREAM_ROUTING
DH_PRECISION_PRIOR = cond.DH_PRECISION_PRIOR
OBS_PRECISION_PRIOR = cond.OBS_PRECISION_PRIOR
HIER_PRECISION_PRIOR = cond.HIER_PRECISION_PRIOR
SEASONAL_MEAN_PRECISION = cond.SEASONAL_MEAN_PRECISION
CONSTRAINED_BIAS_PRECISION = cond.CONSTRAINED_BIAS_PRECISION

_PRIOR_FAMILY = {"P": "gamma", "E": "normal", "R": "lognormal", "Q": "normal", "D": "normal"}

_ID_PATTERN = re.compile(r"^(f?)(?:PROT|(\d{2})([NFH])([FH]))$")

_EPS_LETTER = {"N": "none", "F": "fixed", "H": "hier"}
_BIAS_LETTER = {"F": "fixed", "H": "hier"}


class BuildError(Exception):
    """Configuration, prior, or data inconsistency detected while assembling."""


def parse_model_id(model_id: str) -> dict:
    """Decode a design id like ``12FF``, ``f01NH`` or ``PROT`` into fields."""
    m = _ID_PATTERN.match(model_id)
    if not m:
        raise BuildError(f"unrecognised model id {model_id!r}")
    constrained = m.group(1) == "f"
    if m.group(2) is None:
        return {
            "window": CUMULATIVE,
            "process_error": "none",
            "bias": "fixed",
            "constrained_flow_bias": constrained,
        }
    window = int(m.group(2))
    if window == 0:
        raise BuildError(f"model id {model_id!r} has a zero-month window")
    return {
        "window": window,
        "process_error": _EPS_LETTER[m.group(3)],
        "bias": _BIAS_LETTER[m.group(4)],
        "constrained_flow_bias": constrained,
    }


def format_model_id(
    window: int | str,
    process_error: str,
    bias: str,
    constrained_flow_bias: bool,
) -> str:
    """Inverse of :func:`parse_model_id` for ids in the canonical grammar."""
    prefix = "f" if constrained_flow_bias else ""
    if window == CUMULATIVE:
        if process_error != "none" or bias != "fixed":
            raise BuildError(
                "the cumulative design cell has no process error and fixed bias"
            )
        return prefix + "PROT"
    eps = {v: k for k, v in _EPS_LETTER.items()}[process_error]
    b = {v: k for k, v in _BIAS_LETTER.items()}[bias]
    return f"{prefix}{int(window):02d}{eps}{b}"


@dataclass(frozen=True)
class ModelConfig:
    """Structural choices for one model variant.

    ``window`` is a rolling length in months or :data:`CUMULATIVE`;
    ``process_error`` adds nothing ("none"), one seasonal balance error per
    calendar month ("fixed"), or per-month errors shrunk to seasonal means
    ("hier"); ``bias`` chooses the analogous structure for per-source
    systematic errors; ``constrained_flow_bias`` tightens the seasonal bias
    prior for channel flows (Q) and diversions (D) only.
    """

    id: str
    window: int | str
    process_error: str
    bias: str
    constrained_flow_bias: bool = False
    lakes: tuple[str, ...] = ("SUP", "MHU")
    monitored: tuple[str, ...] = ("*",)

    def __post_init__(self):
        if self.window != CUMULATIVE and (
            not isinstance(self.window, int) or self.window < 1
        ):
            raise BuildError(f"window must be a positive int or cumulative: {self.window!r}")
        if self.process_error not in ("none", "fixed", "hier"):
            raise BuildError(f"bad process_error {self.process_error!r}")
        if self.bias not in ("fixed", "hier"):
            raise BuildError(f"bad bias {self.bias!r}")
        if len(self.lakes) < 1 or len(set(self.lakes)) != len(self.lakes):
            raise BuildError("lakes must be a non-empty unique chain, upstream first")
        if _ID_PATTERN.match(self.id):
            declared = parse_model_id(self.id)
            actual = {
                "window": self.window,
                "process_error": self.process_error,
                "bias": self.bias,
                "constrained_flow_bias": self.constrained_flow_bias,
            }
            if declared != actual:
                raise BuildError(
                    f"id {self.id!r} implies {declared}, but fields say {actual}"
                )


def make_config(model_id: str, **overrides) -> ModelConfig:
    """Build a :class:`ModelConfig` straight from a canonical-grammar id."""
    fields_ = parse_model_id(model_id)
    fields_.update(overrides)
    return ModelConfig(id=model_id, **fields_)


@dataclass(slots=True)
class Node:
    """One vertex of the graph: stochastic, observed, or deterministic."""

    name: str
    role: str  # "stochastic" | "observed" | "deterministic"
    klass: str  # dispatch class, e.g. "theta", "eps_month", "tau_obs", "obs_dh"
    slot: int = -1  # index into the latent state vector (stochastic only)
    lake: int = -1
    comp: int = -1
    source: int = -1
    t: int = -1
    cal: int = -1
    window: int = -1


@dataclass
class UpdateEntry:
    """One ordered step of the systematic scan (a group of independent nodes,
    or a sequential per-month scan where window coupling forbids grouping)."""

    kind: str
    comp: int = -1
    lakes: tuple[int, ...] = ()
    months: np.ndarray | None = None
    source: int = -1
    name: str = ""  # generic (toy) entries only


@dataclass
class SourceBlock:
    """Static per-source data and derived index structures."""

    si: int
    lake: int
    comp: int
    source_index: int
    name: str
    y: np.ndarray  # (T,) NaN at masked
    y0: np.ndarray  # (T,) zero at masked
    mask: np.ndarray  # (T,) bool
    fmask: np.ndarray  # (T,) float
    unmasked_idx: np.ndarray
    cal_unmasked: np.ndarray  # calendar (0..11) of each unmasked month
    cnt_cal: np.ndarray  # (12,) unmasked count per calendar
    bias_prior_precision: float


@dataclass
class Layout:
    """Slot allocation of the flat latent vector, family-major."""

    size: int
    theta: tuple[int, tuple[int, ...]]
    eps_month: tuple[int, tuple[int, ...]] | None
    eps_seas: tuple[int, tuple[int, ...]] | None
    tau_eps: tuple[int, tuple[int, ...]] | None
    eta_month: list[int] | None  # per-source offsets (ragged)
    eta_seas: tuple[int, tuple[int, ...]]
    tau_eta: tuple[int, tuple[int, ...]] | None
    tau_obs: tuple[int, tuple[int, ...]]
    tau_dh: tuple[int, tuple[int, ...]]


class Network:
    """Assembled model: node catalog, static data arrays, and update plan.

    Two kinds exist: ``"l2swbm"`` (full water-balance family, built by
    :func:`build`) and ``"generic"`` (small hand-assembled conjugate networks,
    built by :func:`toy_network`, used for oracle and calibration tests).
    """

    def __init__(self, kind: str):
        self.kind = kind
        self.nodes: dict[str, Node] = {}
        self.stochastic_names: list[str] = []
        self.plan: list[UpdateEntry] = []

    # --- shared API -------------------------------------------------------

    def node(self, name: str) -> Node:
        return self.nodes[name]

    def add_node(self, node: Node) -> Node:
        if node.name in self.nodes:
            raise BuildError(f"duplicate node {node.name!r}")
        self.nodes[node.name] = node
        if node.role == "stochastic":
            node.slot = len(self.stochastic_names)
            self.stochastic_names.append(node.name)
        return node

    @property
    def n_slots(self) -> int:
        return len(self.stochastic_names)

    def new_state(self, vector: np.ndarray | None = None) -> "LatentState":
        if vector is None:
            vector = np.zeros(self.n_slots)
        return LatentState(self, np.asarray(vector, dtype=float))


class LatentState:
    """Flat vector of every stochastic node's current value, with family views.

    Views share memory with the vector: mutating ``state.theta[...]`` mutates
    the vector and vice versa. Deterministic quantities (balances, window
    sums, inflows) are derived on demand via :class:`~l2swbm.conditionals.SweepCache`.
    """

    __slots__ = (
        "network",
        "vector",
        "theta",  # (L, 5, T)
        "eps_month",  # (L, T) or None
        "eps_seas",  # (L, 12) or None
        "tau_eps",  # (L, 12) or None
        "_eta_month",  # list of ragged (U_s,) views, or None
        "eta_seas",  # (S, 12)
        "tau_eta",  # (S, 12) or None
        "tau_obs",  # (S,)
        "tau_dh",  # (L,)
    )

    def __init__(self, network: Network, vector: np.ndarray):
        if vector.shape != (network.n_slots,):
            raise ValueError(
                f"state vector must have {network.n_slots} slots, got {vector.shape}"
            )
        self.network = network
        self.vector = vector
        # Views are carved out once here; every mutation elsewhere goes
        # through them (or ``vector[:] = ...``), never by rebinding. Generic
        # hand-assembled networks have no layout and no family views.
        lay = getattr(network, "layout", None)
        if lay is None:
            self.theta = None
            self.eps_month = self.eps_seas = self.tau_eps = None
            self._eta_month = None
            self.eta_seas = self.tau_eta = None
            self.tau_obs = self.tau_dh = None
            return
        self.theta = self._view(lay.theta)
        self.eps_month = None if lay.eps_month is None else self._view(lay.eps_month)
        self.eps_seas = None if lay.eps_seas is None else self._view(lay.eps_seas)
        self.tau_eps = None if lay.tau_eps is None else self._view(lay.tau_eps)
        if lay.eta_month is None:
            self._eta_month = None
        else:
            self._eta_month = [
                vector[off : off + len(src.unmasked_idx)]
                for off, src in zip(lay.eta_month, network.sources)
            ]
        self.eta_seas = self._view(lay.eta_seas)
        self.tau_eta = None if lay.tau_eta is None else self._view(lay.tau_eta)
        self.tau_obs = self._view(lay.tau_obs)
        self.tau_dh = self._view(lay.tau_dh)

    def copy(self) -> "LatentState":
        return LatentState(self.network, self.vector.copy())

    def _view(self, spec):
        offset, shape = spec
        n = int(np.prod(shape))
        return self.vector[offset : offset + n].reshape(shape)

    def eta_month(self, si: int) -> np.ndarray | None:  # ragged (U_s,)
        return None if self._eta_month is None else self._eta_month[si]

    # Node-level access (slow path; tests and toy networks).

    def value(self, name: str) -> float:
        node = self.network.nodes[name]
        if node.role == "stochastic":
            return float(self.vector[node.slot])
        if node.role == "deterministic":
            cache = cond.SweepCache(self.network, self)
            if node.klass == "balance":
                return float(cache.b[node.lake, node.t])
            if node.klass == "dh":
                return float(cache.S[node.lake, node.window])
            if node.klass == "inflow":
                return float(cond.inflow_from_state(self.network, self, node.lake)[node.t])
            raise KeyError(f"unknown deterministic class {node.klass!r}")
        raise KeyError(f"{name!r} is observed, not part of the state")

    def set_value(self, name: str, value: float) -> None:
        node = self.network.nodes[name]
        if node.role != "stochastic":
            raise KeyError(f"{name!r} is not stochastic")
        self.vector[node.slot] = value


# ---------------------------------------------------------------------------
# Assembly of the full water-balance network
# ---------------------------------------------------------------------------


def _expand_monthly(priors: PriorSpec, lake: str, comp: str, cmap: np.ndarray):
    """Per-analysis-month (a, b) prior parameter arrays from monthly cells."""
    a = np.empty(len(cmap))
    b = np.empty(len(cmap))
    family = _PRIOR_FAMILY[comp]
    for cal in np.unique(cmap):
        cell = priors.get(lake, comp, int(cal) + 1)
        if cell is None:
            raise BuildError(f"missing prior for {comp} {lake} month {int(cal) + 1}")
        if cell.family != family:
            raise BuildError(
                f"prior for {comp} {lake} month {int(cal) + 1} must be "
                f"{family}, got {cell.family}"
            )
        sel = cmap == cal
        a[sel] = cell.params[0]
        b[sel] = cell.params[1]
    return a, b


def build(config: ModelConfig, priors: PriorSpec, table: AlignedTable) -> Network:
    """Assemble a full network from a config, fitted priors, and aligned data.

    Fails fast on span/prior/data inconsistencies; on success the node count
    is checked against the closed-form census for the configuration.
    """
    span = table.span
    T = span.months
    if config.window != CUMULATIVE and config.window > T:
        raise BuildError(f"window {config.window} exceeds span of {T} months")
    for lake in config.lakes:
        if lake not in table.lakes:
            raise BuildError(f"table has no data for lake {lake!r}")
        if lake not in table.levels:
            raise BuildError(f"no level series for lake {lake!r}")

    net = Network("l2swbm")
    net.config = config
    net.span = span
    net.T = T
    net.lakes = tuple(config.lakes)
    net.L = len(net.lakes)
    net.comps = COMPONENTS
    net.sign = SIGN.copy()
    net.window = config.window
    net.eps_mode = config.process_error
    net.bias_mode = config.bias
    net.constrained = config.constrained_flow_bias
    net.cmap = span.calendar_months() - 1  # 0..11

    # Window geometry (shared across lakes).
    if config.window == CUMULATIVE:
        J = T
        win_lo = np.arange(T)
        win_hi = np.full(T, J - 1)
    else:
        w = int(config.window)
        J = T - w + 1
        t = np.arange(T)
        win_lo = np.maximum(0, t - w + 1)
        win_hi = np.minimum(t, J - 1)
    net.J = J
    net.win_lo = win_lo
    net.win_hi = win_hi

    # Level-change observations per lake.
    ydh = np.empty((net.L, J))
    mdh = np.zeros((net.L, J), dtype=bool)
    for li, lake in enumerate(net.lakes):
        obs = delta_h(table.level_series(lake), config.window, span)
        ydh[li] = obs.values
        mdh[li] = obs.mask
    net.ydh = ydh
    net.mdh = mdh
    net.fmdh = mdh.astype(float)
    net.ydh0 = np.where(mdh, ydh, 0.0)
    net.ndh = mdh.sum(axis=1)

    # Per-month unmasked-window counts (the likelihood multiplicity of each
    # month's balance in the ΔH data).
    csm = np.concatenate([np.zeros((net.L, 1)), np.cumsum(net.fmdh, axis=1)], axis=1)
    net.nwin = csm[:, win_hi + 1] - csm[:, win_lo]

    # Window-by-calendar multiplicities, for seasonal process-error updates.
    onehot = np.zeros((T, 12))
    onehot[np.arange(T), net.cmap] = 1.0
    cs = np.concatenate([np.zeros((1, 12)), np.cumsum(onehot, axis=0)], axis=0)
    if config.window == CUMULATIVE:
        wincal = cs[1 + np.arange(J)]  # window t covers months 0..t
    else:
        wincal = cs[int(config.window) :] - cs[: J]
    net.wincal = wincal  # (J, 12)
    net.summ2 = np.einsum("lj,jc->lc", net.fmdh, wincal**2)
    net.calmat = onehot.T  # (12, T) calendar indicator

    net.cal_idx = [np.flatnonzero(net.cmap == c) for c in range(12)]
    net.cnt_cal = np.array([len(ix) for ix in net.cal_idx], dtype=float)

    # Upstream/downstream chain for the outflow->inflow linkage.
    net.downstream = {li: (li + 1, UPSTREAM_ROUTING) for li in range(net.L - 1)}
    net.upstream = {li + 1: (li, UPSTREAM_ROUTING) for li in range(net.L - 1)}

    # Priors expanded over the span.
    prior_a = np.empty((net.L, 5, T))
    prior_b = np.empty((net.L, 5, T))
    for li, lake in enumerate(net.lakes):
        for ci, comp in enumerate(COMPONENTS):
            prior_a[li, ci], prior_b[li, ci] = _expand_monthly(
                priors, lake, comp, net.cmap
            )
    net.prior_a = prior_a
    net.prior_b = prior_b

    # Observation sources, ordered (lake chain, component, source index).
    blocks: list[SourceBlock] = []
    for li, lake in enumerate(net.lakes):
        for ci, comp in enumerate(COMPONENTS):
            for src in table.sources_for(lake, comp):
                constrainable = comp in ("Q", "D")
                tau0 = (
                    CONSTRAINED_BIAS_PRECISION
                    if (config.constrained_flow_bias and constrainable)
                    else SEASONAL_MEAN_PRECISION
                )
                mask = src.mask.copy()
                idx = np.flatnonzero(mask)
                if idx.size == 0:
                    continue
                cal_unmasked = net.cmap[idx]
                blocks.append(
                    SourceBlock(
                        si=len(blocks),
                        lake=li,
                        comp=ci,
                        source_index=src.source_index,
                        name=f"{comp}_{lake}_{src.source_index}",
                        y=np.where(mask, src.values, np.nan),
                        y0=np.where(mask, src.values, 0.0),
                        mask=mask,
                        fmask=mask.astype(float),
                        unmasked_idx=idx,
                        cal_unmasked=cal_unmasked,
                        cnt_cal=np.bincount(cal_unmasked, minlength=12).astype(float),
                        bias_prior_precision=tau0,
                    )
                )
    if not blocks:
        raise BuildError("no observation sources overlap the analysis span")
    net.sources = blocks
    net.S = len(blocks)
    net.srcs_by = {}
    for b in blocks:
        net.srcs_by.setdefault((b.lake, b.comp), []).append(b.si)

    _allocate(net)
    _catalog(net)
    _make_plan(net)

    census = expected_node_counts(net)
    actual = {"stochastic": 0, "observed": 0, "deterministic": 0}
    for node in net.nodes.values():
        actual[node.role] += 1
    if census != actual:
        raise BuildError(f"node census mismatch: expected {census}, built {actual}")
    return net


def _allocate(net: Network) -> None:
    """Family-major slot allocation for the latent vector."""
    off = 0

    def take(shape):
        nonlocal off
        start = off
        off += int(np.prod(shape))
        return (start, tuple(shape))

    theta = take((net.L, 5, net.T))
    eps_month = eps_seas = tau_eps = None
    if net.eps_mode == "hier":
        eps_month = take((net.L, net.T))
    if net.eps_mode in ("fixed", "hier"):
        eps_seas = take((net.L, 12))
    if net.eps_mode == "hier":
        tau_eps = take((net.L, 12))
    eta_month = None
    if net.bias_mode == "hier":
        eta_month = []
        for src in net.sources:
            start, _ = take((len(src.unmasked_idx),))
            eta_month.append(start)
    eta_seas = take((net.S, 12))
    tau_eta = take((net.S, 12)) if net.bias_mode == "hier" else None
    tau_obs = take((net.S,))
    tau_dh = take((net.L,))
    net.layout = Layout(
        size=off,
        theta=theta,
        eps_month=eps_month,
        eps_seas=eps_seas,
        tau_eps=tau_eps,
        eta_month=eta_month,
        eta_seas=eta_seas,
        tau_eta=tau_eta,
        tau_obs=tau_obs,
        tau_dh=tau_dh,
    )


def _catalog(net: Network) -> None:
    """Materialise the node catalog in slot order."""
    lakes, T = net.lakes, net.T
    add = net.add_node
    # Stochastic nodes, in exact layout order so slot == vector index.
    for li, lake in enumerate(lakes):
        for ci, comp in enumerate(COMPONENTS):
            for t in range(T):
                add(
                    Node(
                        f"{comp}_{lake}_{t + 1}",
                        "stochastic",
                        "theta",
                        lake=li,
                        comp=ci,
                        t=t,
                        cal=int(net.cmap[t]),
                    )
                )
    if net.eps_mode == "hier":
        for li, lake in enumerate(lakes):
            for t in range(T):
                add(
                    Node(
                        f"eps_{lake}_{t + 1}",
                        "stochastic",
                        "eps_month",
                        lake=li,
                        t=t,
                        cal=int(net.cmap[t]),
                    )
                )
    if net.eps_mode in ("fixed", "hier"):
        for li, lake in enumerate(lakes):
            for c in range(12):
                add(Node(f"eps_{lake}_cal{c + 1}", "stochastic", "eps_seas", lake=li, cal=c))
    if net.eps_mode == "hier":
        for li, lake in enumerate(lakes):
            for c in range(12):
                add(Node(f"tau_eps_{lake}_cal{c + 1}", "stochastic", "tau_eps", lake=li, cal=c))
    if net.bias_mode == "hier":
        for src in net.sources:
            for t in src.unmasked_idx:
                add(
                    Node(
                        f"eta_{src.name}_{t + 1}",
                        "stochastic",
                        "eta_month",
                        lake=src.lake,
                        comp=src.comp,
                        source=src.si,
                        t=int(t),
                        cal=int(net.cmap[t]),
                    )
                )
    for src in net.sources:
        for c in range(12):
            add(
                Node(
                    f"eta_{src.name}_cal{c + 1}",
                    "stochastic",
                    "eta_seas",
                    lake=src.lake,
                    comp=src.comp,
                    source=src.si,
                    cal=c,
                )
            )
    if net.bias_mode == "hier":
        for src in net.sources:
            for c in range(12):
                add(
                    Node(
                        f"tau_eta_{src.name}_cal{c + 1}",
                        "stochastic",
                        "tau_eta",
                        lake=src.lake,
                        comp=src.comp,
                        source=src.si,
                        cal=c,
                    )
                )
    for src in net.sources:
        add(
            Node(
                f"tau_obs_{src.name}",
                "stochastic",
                "tau_obs",
                lake=src.lake,
                comp=src.comp,
                source=src.si,
            )
        )
    for li, lake in enumerate(lakes):
        add(Node(f"tau_dh_{lake}", "stochastic", "tau_dh", lake=li))

    # Deterministic and observed nodes.
    for li, lake in enumerate(lakes):
        for t in range(T):
            add(Node(f"I_{lake}_{t + 1}", "deterministic", "inflow", lake=li, t=t))
            add(Node(f"balance_{lake}_{t + 1}", "deterministic", "balance", lake=li, t=t))
        for j in range(net.J):
            add(Node(f"dh_{lake}_{j + 1}", "deterministic", "dh", lake=li, window=j))
        for j in np.flatnonzero(net.mdh[li]):
            add(Node(f"y_dh_{lake}_{j + 1}", "observed", "obs_dh", lake=li, window=int(j)))
    for src in net.sources:
        for t in src.unmasked_idx:
            add(
                Node(
                    f"y_{src.name}_{t + 1}",
                    "observed",
                    "obs_comp",
                    lake=src.lake,
                    comp=src.comp,
                    source=src.si,
                    t=int(t),
                )
            )


def _make_plan(net: Network) -> None:
    """Systematic scan: components by time, then process error, biases,
    then precisions. Windows couple neighbouring months under every window
    structure, so the component and monthly-error classes scan month by
    month; each node draw visits exactly the windows containing that month,
    which is what makes long-window designs proportionally costlier."""
    plan: list[UpdateEntry] = []
    T = net.T
    all_lakes = tuple(range(net.L))

    plan.append(UpdateEntry("theta_scan", lakes=all_lakes, months=np.arange(T)))
    if net.eps_mode == "hier":
        plan.append(UpdateEntry("eps_scan", lakes=all_lakes, months=np.arange(T)))
        plan.append(UpdateEntry("eps_seas_hier", lakes=all_lakes))
    elif net.eps_mode == "fixed":
        for li in all_lakes:
            plan.append(UpdateEntry("eps_seas_fixed", lakes=(li,)))
    if net.bias_mode == "hier":
        for src in net.sources:
            plan.append(UpdateEntry("eta_month", source=src.si))
    for src in net.sources:
        plan.append(UpdateEntry("eta_seas", source=src.si))
    plan.append(UpdateEntry("tau_dh"))
    plan.append(UpdateEntry("tau_obs"))
    if net.eps_mode == "hier":
        plan.append(UpdateEntry("tau_eps"))
    if net.bias_mode == "hier":
        plan.append(UpdateEntry("tau_eta"))
    net.plan = plan


def plan_slot_coverage(net: Network) -> np.ndarray:
    """How many times each stochastic slot is touched by one full sweep."""
    counts = np.zeros(net.n_slots, dtype=int)
    layout = net.layout

    def theta_slot(li, ci, t):
        off, shape = layout.theta
        return off + (li * shape[1] + ci) * shape[2] + t

    for entry in net.plan:
        if entry.kind == "theta_scan":
            for li in entry.lakes:
                for ci in range(len(COMPONENTS)):
                    for t in entry.months:
                        counts[theta_slot(li, ci, int(t))] += 1
        elif entry.kind == "eps_scan":
            off, shape = layout.eps_month
            for li in entry.lakes:
                for t in entry.months:
                    counts[off + li * shape[1] + int(t)] += 1
        elif entry.kind == "eps_seas_hier":
            off, shape = layout.eps_seas
            counts[off : off + int(np.prod(shape))] += 1
        elif entry.kind == "eps_seas_fixed":
            off, shape = layout.eps_seas
            for li in entry.lakes:
                counts[off + li * 12 : off + (li + 1) * 12] += 1
        elif entry.kind == "eta_month":
            off = layout.eta_month[entry.source]
            counts[off : off + len(net.sources[entry.source].unmasked_idx)] += 1
        elif entry.kind == "eta_seas":
            off, _ = layout.eta_seas
            counts[off + entry.source * 12 : off + (entry.source + 1) * 12] += 1
        elif entry.kind == "tau_dh":
            off, shape = layout.tau_dh
            counts[off : off + int(np.prod(shape))] += 1
        elif entry.kind == "tau_obs":
            off, shape = layout.tau_obs
            counts[off : off + int(np.prod(shape))] += 1
        elif entry.kind == "tau_eps":
            off, shape = layout.tau_eps
            counts[off : off + int(np.prod(shape))] += 1
        elif entry.kind == "tau_eta":
            off, shape = layout.tau_eta
            counts[off : off + int(np.prod(shape))] += 1
        elif entry.kind == "generic":
            counts[net.nodes[entry.name].slot] += 1
        else:
            raise BuildError(f"unknown plan entry {entry.kind!r}")
    return counts


def expected_node_counts(net: Network) -> dict[str, int]:
    """Closed-form node census implied by the configuration and masks."""
    if net.kind != "l2swbm":
        sto = len(net.stochastic_names)
        obs = sum(1 for n in net.nodes.values() if n.role == "observed")
        return {"stochastic": sto, "observed": obs, "deterministic": 0}
    L, T, J, S = net.L, net.T, net.J, net.S
    unmasked_obs = sum(len(s.unmasked_idx) for s in net.sources)
    sto = 5 * L * T + S * 12 + S + L
    if net.eps_mode == "fixed":
        sto += 12 * L
    elif net.eps_mode == "hier":
        sto += L * T + 24 * L
    if net.bias_mode == "hier":
        sto += unmasked_obs + S * 12
    observed = unmasked_obs + int(net.mdh.sum())
    deterministic = 2 * L * T + L * J
    return {"stochastic": sto, "observed": observed, "deterministic": deterministic}


# ---------------------------------------------------------------------------
# Hand-assembled conjugate networks (test oracles, small calibration models)
# ---------------------------------------------------------------------------


@dataclass
class GenericObs:
    """Observed normal datum: mean = const + sum(coeff * latent)."""

    name: str
    value: float
    precision: float | str  # fixed value or name of a gamma latent
    terms: tuple[tuple[str, float], ...]
    const: float = 0.0
    mask: bool = True


def toy_network(
    latents: dict[str, tuple],
    observations: list[dict],
) -> Network:
    """Build a small generic conjugate network.

    ``latents`` maps a name to ``("normal", mean, precision)`` or
    ``("gamma", shape, rate)``; ``observations`` entries give ``value``,
    ``precision`` (float or latent name), ``terms`` as (name, coeff) pairs,
    and optional ``const`` and ``mask``.
    """
    net = Network("generic")
    net.gen_prior: dict[str, tuple] = {}
    net.gen_obs: list[GenericObs] = []
    for name, spec in latents.items():
        family = spec[0]
        if family not in ("normal", "gamma"):
            raise BuildError(f"toy latent family must be normal or gamma: {family!r}")
        net.gen_prior[name] = (family, float(spec[1]), float(spec[2]))
        klass = "generic_normal" if family == "normal" else "generic_gamma"
        net.add_node(Node(name, "stochastic", klass))
        net.plan.append(UpdateEntry("generic", name=name))
    for i, raw in enumerate(observations):
        terms = tuple((str(n), float(c)) for n, c in raw.get("terms", ()))
        for n, _ in terms:
            if n not in net.gen_prior or net.gen_prior[n][0] != "normal":
                raise BuildError(f"observation term {n!r} is not a normal latent")
        prec = raw["precision"]
        if isinstance(prec, str) and (
            prec not in net.gen_prior or net.gen_prior[prec][0] != "gamma"
        ):
            raise BuildError(f"precision ref {prec!r} is not a gamma latent")
        obs = GenericObs(
            name=raw.get("name", f"y_{i + 1}"),
            value=float(raw["value"]),
            precision=prec if isinstance(prec, str) else float(prec),
            terms=terms,
            const=float(raw.get("const", 0.0)),
            mask=bool(raw.get("mask", True)),
        )
        net.gen_obs.append(obs)
        net.add_node(Node(obs.name, "observed", "obs_generic"))
    return net


def _generic_obs_mean(net: Network, state: LatentState, obs: GenericObs) -> float:
    mean = obs.const
    for name, coeff in obs.terms:
        mean += coeff * state.vector[net.nodes[name].slot]
    return mean


def _generic_obs_precision(net: Network, state: LatentState, obs: GenericObs) -> float:
    if isinstance(obs.precision, str):
        return float(state.vector[net.nodes[obs.precision].slot])
    return obs.precision


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)


def _normal_logpdf_sum(x, mean, precision, weight=None):
    term = 0.5 * (np.log(precision) - _LOG_2PI) - 0.5 * precision * (x - mean) ** 2
    if weight is not None:
        term = term * weight
    return float(np.sum(term))


def _gamma_logpdf_sum(x, shape, rate):
    if np.any(np.asarray(x) <= 0.0):
        return -np.inf
    from scipy.special import gammaln

    term = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    return float(np.sum(term))


def observation_loglik(
    net: Network, state: LatentState, cache: "cond.SweepCache | None" = None
) -> float:
    """Sum of unmasked observation log densities under the current state."""
    if net.kind == "generic":
        total = 0.0
        for obs in net.gen_obs:
            if not obs.mask:
                continue
            tau = _generic_obs_precision(net, state, obs)
            if tau <= 0.0:
                return -np.inf
            mu = _generic_obs_mean(net, state, obs)
            total += 0.5 * (math.log(tau) - _LOG_2PI) - 0.5 * tau * (obs.value - mu) ** 2
        return total
    if cache is None:
        cache = cond.SweepCache(net, state)
    tau_dh = state.tau_dh
    if np.any(tau_dh <= 0.0) or np.any(state.tau_obs <= 0.0):
        return -np.inf
    total = 0.0
    for li in range(net.L):
        total += _normal_logpdf_sum(
            net.ydh0[li], cache.S[li], tau_dh[li], weight=net.fmdh[li]
        )
    for src in net.sources:
        eta = cond.source_bias_vector(net, state, src.si)
        mu = state.theta[src.lake, src.comp] + eta
        total += _normal_logpdf_sum(
            src.y0, mu, float(state.tau_obs[src.si]), weight=src.fmask
        )
    return total


def log_joint(net: Network, state: LatentState) -> float:
    """Joint log density (priors + unmasked likelihoods) of the whole graph.

    Returns -inf outside support (non-positive precipitation, runoff or
    precision values). Evaluation order is irrelevant: this is a plain sum
    over the node catalog's density terms.
    """
    if net.kind == "generic":
        total = 0.0
        for name, (family, a, b) in net.gen_prior.items():
            x = float(state.vector[net.nodes[name].slot])
            if family == "normal":
                total += 0.5 * (math.log(b) - _LOG_2PI) - 0.5 * b * (x - a) ** 2
            else:
                t = _gamma_logpdf_sum(x, a, b)
                if t == -np.inf:
                    return -np.inf
                total += t
        lik = observation_loglik(net, state)
        return total + lik

    theta = state.theta
    # Support checks first.
    for ci, comp in enumerate(COMPONENTS):
        if comp in ("P", "R") and np.any(theta[:, ci, :] <= 0.0):
            return -np.inf
    for arr in (state.tau_obs, state.tau_dh, state.tau_eps, state.tau_eta):
        if arr is not None and np.any(arr <= 0.0):
            return -np.inf

    total = 0.0
    for ci, comp in enumerate(COMPONENTS):
        x = theta[:, ci, :]
        a, b = net.prior_a[:, ci, :], net.prior_b[:, ci, :]
        if comp == "P":
            t = _gamma_logpdf_sum(x, a, b)
            if t == -np.inf:
                return -np.inf
            total += t
        elif comp == "R":
            logs = np.log(x)
            total += float(
                np.sum(0.5 * (np.log(b) - _LOG_2PI) - logs - 0.5 * b * (logs - a) ** 2)
            )
        else:
            total += _normal_logpdf_sum(x, a, b)

    if net.eps_mode == "fixed":
        total += _normal_logpdf_sum(state.eps_seas, 0.0, SEASONAL_MEAN_PRECISION)
    elif net.eps_mode == "hier":
        seas = state.eps_seas
        tau = state.tau_eps
        total += _normal_logpdf_sum(seas, 0.0, SEASONAL_MEAN_PRECISION)
        total += _gamma_logpdf_sum(tau, *HIER_PRECISION_PRIOR)
        cal = net.cmap
        total += _normal_logpdf_sum(state.eps_month, seas[:, cal], tau[:, cal])

    for src in net.sources:
        tau0 = src.bias_prior_precision
        seas = state.eta_seas[src.si]
        total += _normal_logpdf_sum(seas, 0.0, tau0)
        if net.bias_mode == "hier":
            tau = state.tau_eta[src.si]
            total += _gamma_logpdf_sum(tau, *HIER_PRECISION_PRIOR)
            cal = src.cal_unmasked
            total += _normal_logpdf_sum(state.eta_month(src.si), seas[cal], tau[cal])

    total += _gamma_logpdf_sum(state.tau_obs, *OBS_PRECISION_PRIOR)
    total += _gamma_logpdf_sum(state.tau_dh, *DH_PRECISION_PRIOR)
    if total == -np.inf or not np.isfinite(total):
        return -np.inf
    return total + observation_loglik(net, state)


def deviance(net: Network, state: LatentState) -> float:
    """-2 times the unmasked observation log likelihood."""
    return -2.0 * observation_loglik(net, state)


# ---------------------------------------------------------------------------
# Full conditionals
# ---------------------------------------------------------------------------


def full_conditional(
    net: Network,
    name: str,
    state: LatentState,
    cache: "cond.SweepCache | None" = None,
):
    """Exact full-conditional descriptor for one stochastic node.

    Returns a :class:`~l2swbm.conditionals.NormalCond`,
    :class:`~l2swbm.conditionals.GammaCond` or
    :class:`~l2swbm.conditionals.SliceCond` whose density is proportional to
    the joint with every other node held at its current value.
    """
    node = net.nodes[name]
    if node.role != "stochastic":
        raise KeyError(f"{name!r} is not stochastic")
    if net.kind == "generic":
        return _generic_conditional(net, node, state)
    if cache is None:
        cache = cond.SweepCache(net, state)
    return cond.node_conditional(net, state, cache, node)


def _generic_conditional(net: Network, node: Node, state: LatentState):
    family, a, b = net.gen_prior[node.name]
    if family == "normal":
        A, B = b, b * a
        x_cur = float(state.vector[node.slot])
        for obs in net.gen_obs:
            coeffs = dict(obs.terms)
            k = coeffs.get(node.name)
            if k is None or not obs.mask:
                continue
            tau = _generic_obs_precision(net, state, obs)
            rest = _generic_obs_mean(net, state, obs) - k * x_cur
            A += tau * k * k
            B += tau * k * (obs.value - rest)
        return cond.NormalCond(mean=B / A, precision=A)
    shape, rate = a, b
    for obs in net.gen_obs:
        if obs.precision == node.name and obs.mask:
            mu = _generic_obs_mean(net, state, obs)
            shape += 0.5
            rate += 0.5 * (obs.value - mu) ** 2
    return cond.GammaCond(shape=shape, rate=rate)


# ---------------------------------------------------------------------------
# Observation simulation (calibration tests, synthetic fixtures)
# ---------------------------------------------------------------------------


def simulate_observations(net: Network, state: LatentState, rng: np.random.Generator):
    """Draw a fresh set of observations from the current latent state.

    Masks are preserved: masked positions stay masked. Returns
    ``(ydh, source_values)`` without touching the network; use
    :func:`set_observation_values` to install them.
    """
    if net.kind != "l2swbm":
        raise BuildError("simulation is defined for assembled balance networks")
    cache = cond.SweepCache(net, state)
    sd_dh = 1.0 / np.sqrt(state.tau_dh)[:, None]
    ydh = cache.S + rng.standard_normal((net.L, net.J)) * sd_dh
    ydh = np.where(net.mdh, ydh, np.nan)
    source_values = []
    for src in net.sources:
        eta = cond.source_bias_vector(net, state, src.si)
        mu = state.theta[src.lake, src.comp] + eta
        y = mu + rng.standard_normal(net.T) / math.sqrt(float(state.tau_obs[src.si]))
        source_values.append(np.where(src.mask, y, np.nan))
    return ydh, source_values


def set_observation_values(net: Network, ydh: np.ndarray, source_values) -> None:
    """Replace observation values in place (masks must be unchanged)."""
    if ydh.shape != net.ydh.shape:
        raise BuildError("ydh shape mismatch")
    net.ydh = np.where(net.mdh, ydh, np.nan)
    net.ydh0 = np.where(net.mdh, ydh, 0.0)
    for src, y in zip(net.sources, source_values):
        src.y = np.where(src.mask, y, np.nan)
        src.y0 = np.where(src.mask, y, 0.0)


# ---------------------------------------------------------------------------
# Inspection
# ---------------------------------------------------------------------------


def to_dot(net: Network, max_edges: int = 200_000) -> str:
    """DOT text for the node graph (stochastic ellipses, observed boxes,
    deterministic diamonds). Edge lists are exact; for very large cumulative
    graphs the dump truncates with a comment once ``max_edges`` is reached."""
    lines = ["digraph model {", "  rankdir=LR;"]
    shapes = {"stochastic": "ellipse", "observed": "box", "deterministic": "diamond"}
    for node in net.nodes.values():
        lines.append(f'  "{node.name}" [shape={shapes[node.role]}];')
    edges: list[str] = []

    def edge(a, b):
        edges.append(f'  "{a}" -> "{b}";')

    if net.kind == "generic":
        for obs in net.gen_obs:
            for name, _ in obs.terms:
                edge(name, obs.name)
            if isinstance(obs.precision, str):
                edge(obs.precision, obs.name)
    else:
        lakes = net.lakes
        for li, lake in enumerate(lakes):
            for t in range(net.T):
                bal = f"balance_{lake}_{t + 1}"
                for comp in COMPONENTS:
                    edge(f"{comp}_{lake}_{t + 1}", bal)
                edge(f"I_{lake}_{t + 1}", bal)
                if li - 1 in range(net.L) and li > 0:
                    edge(f"Q_{lakes[li - 1]}_{t + 1}", f"I_{lake}_{t + 1}")
                if net.eps_mode == "hier":
                    edge(f"eps_{lake}_{t + 1}", bal)
                elif net.eps_mode == "fixed":
                    edge(f"eps_{lake}_cal{int(net.cmap[t]) + 1}", bal)
            if net.eps_mode == "hier":
                for t in range(net.T):
                    c = int(net.cmap[t]) + 1
                    edge(f"eps_{lake}_cal{c}", f"eps_{lake}_{t + 1}")
                    edge(f"tau_eps_{lake}_cal{c}", f"eps_{lake}_{t + 1}")
            for j in range(net.J):
                dh = f"dh_{lake}_{j + 1}"
                if net.window == CUMULATIVE:
                    months = range(0, j + 1)
                else:
                    months = range(j, j + int(net.window))
                for t in months:
                    edge(f"balance_{lake}_{t + 1}", dh)
                    if len(edges) >= max_edges:
                        break
                if net.mdh[li, j]:
                    edge(dh, f"y_dh_{lake}_{j + 1}")
                    edge(f"tau_dh_{lake}", f"y_dh_{lake}_{j + 1}")
                if len(edges) >= max_edges:
                    break
        for src in net.sources:
            lake = lakes[src.lake]
            comp = COMPONENTS[src.comp]
            for t in src.unmasked_idx:
                oname = f"y_{src.name}_{t + 1}"
                edge(f"{comp}_{lake}_{t + 1}", oname)
                edge(f"tau_obs_{src.name}", oname)
                if net.bias_mode == "hier":
                    edge(f"eta_{src.name}_{t + 1}", oname)
                else:
                    edge(f"eta_{src.name}_cal{int(net.cmap[t]) + 1}", oname)
            if net.bias_mode == "hier":
                for t in src.unmasked_idx:
                    c = int(net.cmap[t]) + 1
                    edge(f"eta_{src.name}_cal{c}", f"eta_{src.name}_{t + 1}")
                    edge(f"tau_eta_{src.name}_cal{c}", f"eta_{src.name}_{t + 1}")
    if len(edges) > max_edges:
        edges = edges[:max_edges] + [f"  // truncated at {max_edges} edges"]
    lines.extend(edges)
    lines.append("}")
    return "\n".join(lines) + "\n"
