"""Network-level reliability: two-terminal connectivity, pointwise fragility
and deterioration primitives, and conditional reliability timelines for
compiled models that declare a time axis.

Timelines come in two flavours.  An *annual* axis treats each year's system
node as that year's performance, so the index for year t conditions on
survival through years 1..t-1 (on top of whatever evidence the caller
supplies).  A *cumulative* axis uses absorbing failure nodes, where
Pr[failed by t] is already the quantity of interest and no extra
conditioning applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import dists
from .bn import DiscreteBN, DiscreteNode, ImpossibleEvidenceError
from .discretize import IntervalScheme

__all__ = [
    "TopologyError",
    "TimelineError",
    "Link",
    "NetworkTopology",
    "FragilityCurve",
    "DeteriorationModel",
    "TimelineRow",
    "fragility_failure_probability",
    "deterioration_cpt",
    "connectivity",
    "topology_of",
    "annual_system_reliability",
    "system_timeline",
]


class TopologyError(ValueError):
    """Mismatched or incomplete network-topology description."""


class TimelineError(ValueError):
    """The model has no usable time axis for the requested query."""


# ---------- topology ----------

@dataclass(frozen=True)
class Link:
    tail: str
    head: str
    component: str | None = None  # None: plain track, always passable


@dataclass(frozen=True)
class NetworkTopology:
    """Source/terminal graph whose links close when their component fails.

    ``component_nodes`` maps a component to the network node holding its
    per-year performance, as a template with a ``{t}`` placeholder.
    """

    source: str
    terminal: str
    links: tuple[Link, ...]
    component_nodes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ends = {e for ln in self.links for e in (ln.tail, ln.head)}
        for point in (self.source, self.terminal):
            if point not in ends:
                raise TopologyError(f"{point!r} is not an endpoint of any link")
        seen: set[str] = set()
        for ln in self.links:
            if ln.component is None:
                continue
            if ln.component in seen:
                raise TopologyError(f"component {ln.component!r} sits on two links")
            seen.add(ln.component)
        mapped = set(self.component_nodes)
        if mapped and mapped != seen:
            odd = sorted(mapped.symmetric_difference(seen))
            raise TopologyError(f"component/node mapping disagrees with the links: {odd}")

    @classmethod
    def from_doc(cls, doc: Mapping) -> "NetworkTopology":
        links = tuple(Link(d["from"], d["to"], d.get("component")) for d in doc["links"])
        return cls(source=doc["source"], terminal=doc["terminal"], links=links,
                   component_nodes=dict(doc.get("component_nodes", {})))

    @property
    def components(self) -> tuple[str, ...]:
        return tuple(ln.component for ln in self.links if ln.component is not None)

    def node_for(self, component: str, t: int) -> str:
        try:
            template = self.component_nodes[component]
        except KeyError:
            raise TopologyError(f"no network node mapped for component {component!r}")
        return template.format(t=int(t))


def topology_of(cm) -> NetworkTopology:
    doc = cm.topology
    if not doc:
        raise TopologyError(f"{cm.name}: model declares no network topology")
    return NetworkTopology.from_doc(doc)


def _working(component: str, value) -> bool:
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)) and value in (0, 1):
        return bool(value)
    raise TopologyError(f"state for component {component!r} must be 0/1, got {value!r}")


def connectivity(topology: NetworkTopology, states: Mapping[str, object]) -> int:
    """1 when a chain of passable links joins source to terminal, else 0.

    ``states`` maps every component to a working flag (1 = working); links
    without a component are always passable, and any link may be travelled
    in either direction.
    """
    passable: dict[str, list[str]] = {}
    for ln in topology.links:
        if ln.component is not None:
            if ln.component not in states:
                raise TopologyError(f"no state given for component {ln.component!r}")
            if not _working(ln.component, states[ln.component]):
                continue
        passable.setdefault(ln.tail, []).append(ln.head)
        passable.setdefault(ln.head, []).append(ln.tail)
    frontier, reached = [topology.source], {topology.source}
    while frontier:
        here = frontier.pop()
        if here == topology.terminal:
            return 1
        for there in passable.get(here, ()):
            if there not in reached:
                reached.add(there)
                frontier.append(there)
    return 0


# ---------- fragility ----------

@dataclass(frozen=True)
class FragilityCurve:
    """Lognormal fragility in the hazard level, with an optional lognormal
    site factor multiplying the hazard (folded in analytically)."""

    log_median: float
    log_std: float
    scale: dists.Lognormal | None = None

    def __post_init__(self):
        if self.log_std < 0:
            raise ValueError(f"fragility needs log_std >= 0, got {self.log_std}")
        if self.log_std == 0 and self.scale is None:
            raise ValueError("a step fragility (log_std 0, no site factor) has no spread")


def fragility_failure_probability(curve: FragilityCurve, h):
    """Failure probability at hazard level ``h`` (scalar or array), the site
    factor integrated out.

    The product of the hazard and a lognormal site factor stays lognormal,
    so the exceedance collapses to a single normal cdf instead of a
    quadrature over the factor.
    """
    arr = np.asarray(h, dtype=float)
    if not np.all(arr > 0):
        raise ValueError("hazard level must be positive")
    mu_x, var_x = 0.0, 0.0
    if curve.scale is not None:
        mu_x, var_x = curve.scale.log_mean, curve.scale.log_std ** 2
    z = (np.log(arr) + mu_x - curve.log_median) / math.sqrt(curve.log_std ** 2 + var_x)
    out = dists.std_normal_cdf(z)
    return float(out) if arr.ndim == 0 else out


# ---------- deterioration ----------

@dataclass(frozen=True)
class DeteriorationModel:
    """One-step capacity retention: next = previous x Beta ratio on [0, 1]."""

    ratio_mean: float = 0.98
    ratio_std: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.ratio_mean < 1.0:
            raise ValueError(f"retention mean must sit in (0, 1), got {self.ratio_mean}")

    def retention(self) -> dists.Beta:
        return dists.Beta.from_moments(mean=self.ratio_mean, std=self.ratio_std,
                                       lower=0.0, upper=1.0)


def deterioration_cpt(model: DeteriorationModel, scheme: IntervalScheme,
                      reps: Iterable[float] | None = None) -> np.ndarray:
    """Row-stochastic transition matrix Pr(next cell | previous = rep) on
    ``scheme``; representatives default to the scheme midpoints.

    Support never crosses the conditioning value: cells entirely above a
    row's representative get exactly zero mass.
    """
    ratio = model.retention()
    reps_arr = np.asarray(scheme.midpoints() if reps is None else list(reps), dtype=float)
    if not np.all(reps_arr > 0):
        raise ValueError("representatives must be positive")
    borders = scheme.borders
    cdf = np.asarray(ratio.cdf(np.clip(borders[None, :] / reps_arr[:, None], 0.0, 1.0)))
    table = np.empty((len(reps_arr), scheme.n_states))
    table[:, 0] = cdf[:, 1]  # below-grid mass folds into the lowest cell
    table[:, 1:len(borders) - 1] = np.diff(cdf[:, 1:], axis=1)
    if scheme.tail:
        table[:, -1] = 1.0 - cdf[:, -1]
    sums = table.sum(axis=1, keepdims=True)
    return np.clip(table, 0.0, None) / sums


# ---------- reliability timelines ----------

@dataclass(frozen=True)
class TimelineRow:
    t: int
    pf: float
    beta: float


def _timeline_doc(cm) -> dict:
    tl = cm.timeline
    if not tl:
        raise TimelineError(f"{cm.name}: model declares no time axis")
    mode = tl.get("mode", "cumulative")
    if mode not in ("annual", "cumulative"):
        raise TimelineError(f"{cm.name}: unknown timeline mode {mode!r}")
    return tl


def _year_node(tl: Mapping, t: int) -> str:
    return str(tl["node_template"]).format(t=int(t))


def _finding_to_mask(node: DiscreteNode, finding) -> np.ndarray:
    mask = np.zeros(node.card, dtype=bool)
    if isinstance(finding, (list, tuple, set, frozenset, np.ndarray)) and not isinstance(finding, str):
        arr = np.asarray(sorted(finding) if isinstance(finding, (set, frozenset)) else finding)
        if arr.dtype == bool:
            return arr.astype(bool)
        mask[[node.state_index(s) for s in arr.tolist()]] = True
    else:
        mask[node.state_index(finding)] = True
    return mask


def _condition_on_survival(bn: DiscreteBN, tl: Mapping, evidence: Mapping | None,
                           upto: int) -> dict:
    """Evidence plus survival of the system node in every year 1..upto."""
    ev = dict(evidence or {})
    fail_state = tl["failure_state"]
    for s in range(1, upto + 1):
        name = _year_node(tl, s)
        node = bn[name]
        alive = np.ones(node.card, dtype=bool)
        alive[node.state_index(fail_state)] = False
        if name in ev:
            alive &= _finding_to_mask(node, ev[name])
            if not alive.any():
                raise ImpossibleEvidenceError(
                    f"{name}: evidence contradicts survival through year {upto}")
        hits = np.flatnonzero(alive)
        ev[name] = int(hits[0]) if len(hits) == 1 else alive
    return ev


def annual_system_reliability(cm, evidence: Mapping | None = None, t: int = 1) -> float:
    """Reliability index for year ``t`` given the evidence and survival
    through years 1..t-1.

    Pinning the year's own node via evidence degenerates the index to
    +/-inf; conditioning with zero probability raises
    ImpossibleEvidenceError.
    """
    tl = _timeline_doc(cm)
    horizon = int(tl["horizon"])
    if not 1 <= int(t) <= horizon:
        raise TimelineError(f"year {t} outside 1..{horizon}")
    ev = _condition_on_survival(cm.bn, tl, evidence, int(t) - 1)
    pf = cm.bn.posterior(_year_node(tl, int(t)), ev)[tl["failure_state"]]
    return float(-dists.std_normal_quantile(pf))


def system_timeline(cm, evidence: Mapping | None = None,
                    upto: int | None = None) -> list[TimelineRow]:
    """Failure probability and reliability index per year under ``evidence``.

    Annual models condition each year on survival through the years before
    it; cumulative models read Pr[failed by t] straight off the absorbing
    failure chain.
    """
    tl = _timeline_doc(cm)
    horizon = int(tl["horizon"])
    last = horizon if upto is None else int(upto)
    if not 1 <= last <= horizon:
        raise TimelineError(f"year {last} outside 1..{horizon}")
    annual = tl.get("mode", "cumulative") == "annual"
    rows = []
    for t in range(1, last + 1):
        ev = _condition_on_survival(cm.bn, tl, evidence, t - 1) if annual else evidence
        pf = cm.bn.posterior(_year_node(tl, t), ev)[tl["failure_state"]]
        rows.append(TimelineRow(t, float(pf), float(-dists.std_normal_quantile(pf))))
    return rows
