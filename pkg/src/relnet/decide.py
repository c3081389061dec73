"""Decision analysis on compiled networks.

Expected utilities combine a per-alternative action term with utilities
attached to node states; a utility entry restricted via ``alternatives``
only scores the branches it names.  Value-of-information sums, over the
joint outcome distribution of a measurement set, the utility of deciding
*after* seeing the outcome, minus deciding now.  Both quantities come from
the same joint tables, so the information value is nonnegative down to
floating-point noise and excludes any cost of actually measuring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .bn import evidence_fingerprint
from .compile import CompiledModel

__all__ = [
    "DecisionError",
    "DecisionResult",
    "InformationValue",
    "PlanRow",
    "default_measurement_sets",
    "expected_utility",
    "measurement_plan",
    "optimal_decision",
    "value_of_information",
]

_MAX_JOINT_STATES = 1_000_000


class DecisionError(ValueError):
    """The model has no decision block, or the request does not fit it."""


def _decision(cm: CompiledModel) -> dict:
    dec = cm.decision
    if not dec:
        raise DecisionError(f"model {cm.name!r} declares no decision")
    return dec


def _utilities_for(dec: dict, alternative: str) -> list[dict]:
    if alternative not in dec["alternatives"]:
        raise DecisionError(f"unknown alternative {alternative!r}; "
                            f"declared: {', '.join(dec['alternatives'])}")
    return [u for u in dec.get("utilities", ())
            if alternative in u.get("alternatives", dec["alternatives"])]


def expected_utility(cm: CompiledModel, alternative: str,
                     evidence: Mapping | None = None) -> float:
    """Expected utility of committing to ``alternative`` under the findings."""
    dec = _decision(cm)
    utilities = _utilities_for(dec, alternative)   # validates the name first
    bn = cm.network(alternative)
    total = float(dec.get("action_utility", {}).get(alternative, 0.0))
    for u in utilities:
        post = bn.posterior(u["node"], evidence=dict(evidence or {}))
        total += sum(float(v) * post[state] for state, v in u["values"].items())
    return total


@dataclass(frozen=True)
class DecisionResult:
    utilities: dict[str, float]     # alternative -> expected utility
    best: str
    evidence_key: str

    @property
    def alternatives(self) -> tuple[str, ...]:
        return tuple(self.utilities)


def optimal_decision(cm: CompiledModel, evidence: Mapping | None = None) -> DecisionResult:
    """Evaluate every alternative; ties keep the earliest declared one."""
    dec = _decision(cm)
    scores = {alt: expected_utility(cm, alt, evidence) for alt in dec["alternatives"]}
    best = max(dec["alternatives"], key=lambda a: scores[a])
    for alt in dec["alternatives"]:   # earliest declared wins exact ties
        if scores[alt] == scores[best]:
            best = alt
            break
    return DecisionResult(utilities=scores, best=best,
                          evidence_key=evidence_fingerprint(evidence))


@dataclass(frozen=True)
class InformationValue:
    measurements: tuple[str, ...]
    value: float                    # expected gain from deciding after observing
    prior_best: str
    prior_utility: float
    state_count: int


def value_of_information(cm: CompiledModel, measurements: Sequence[str],
                         evidence: Mapping | None = None) -> InformationValue:
    """Expected utility gain from observing ``measurements`` before deciding.

    Per-state and prior utilities are read off the same joint tables
    (perfect-information terms never divide by the outcome probability), so
    states of probability zero drop out and the result is exact.
    """
    dec = _decision(cm)
    ms = tuple(dict.fromkeys(measurements))
    if not ms:
        raise DecisionError("no measurement nodes given")
    ev = dict(evidence or {})
    for m in ms:
        if m in ev:
            raise DecisionError(f"measurement {m!r} is already observed")
    bn = cm.network()
    n_states = math.prod(bn[m].card for m in ms)
    if n_states > _MAX_JOINT_STATES:
        raise DecisionError(
            f"{len(ms)} measurements span {n_states} joint outcomes "
            f"(cap {_MAX_JOINT_STATES})")

    # weighted utility per joint outcome: rows sum to p(outcome)*EU(alt|outcome)
    weighted = np.zeros((len(dec["alternatives"]), n_states))
    for ai, alt in enumerate(dec["alternatives"]):
        net = cm.network(alt)
        outcome_p = None
        for u in _utilities_for(dec, alt):
            joint, _ = net.joint_posterior([*ms, u["node"]], ev)
            flat = joint.table.reshape(n_states, net[u["node"]].card)
            vals = np.array([float(u["values"].get(s, 0.0))
                             for s in net[u["node"]].states])
            weighted[ai] += flat @ vals
            outcome_p = flat.sum(axis=1)
        if outcome_p is None:   # pure action utility: outcome spread needed anyway
            joint, _ = net.joint_posterior(list(ms), ev)
            outcome_p = joint.table.reshape(n_states)
        act = float(dec.get("action_utility", {}).get(alt, 0.0))
        weighted[ai] += act * outcome_p

    prior = weighted.sum(axis=1)
    prior_best = int(np.argmax(prior))
    informed = weighted.max(axis=0).sum()
    return InformationValue(
        measurements=ms,
        value=float(informed - prior[prior_best]),
        prior_best=dec["alternatives"][prior_best],
        prior_utility=float(prior[prior_best]),
        state_count=n_states,
    )


@dataclass(frozen=True)
class PlanRow:
    measurements: tuple[str, ...]
    value: float
    cost: float
    net: float
    recommended: bool


def default_measurement_sets(cm: CompiledModel) -> list[list[str]]:
    """Each declared measurement alone, then (if several) all together."""
    declared = list(_decision(cm).get("measurements", []))
    if not declared:
        raise DecisionError(f"model {cm.name!r} declares no measurements")
    groups = [[m] for m in declared]
    if len(declared) > 1:
        groups.append(declared)
    return groups


def measurement_plan(cm: CompiledModel, groups: Sequence[Sequence[str]] | None = None,
                     evidence: Mapping | None = None, *,
                     unit_cost: float = 0.0) -> list[PlanRow]:
    """Information value per measurement group, net of a per-reading cost.

    The group with the highest net gain is flagged ``recommended`` — but only
    if that gain is positive; measuring is never recommended at a loss.
    """
    if groups is None:
        groups = default_measurement_sets(cm)
    if not groups:
        raise DecisionError("no measurement sets given")
    scored = []
    for group in groups:
        info = value_of_information(cm, group, evidence)
        cost = unit_cost * len(info.measurements)
        scored.append((info.measurements, info.value, cost, info.value - cost))
    best = max(range(len(scored)), key=lambda i: scored[i][3])
    return [PlanRow(m, v, c, n, recommended=(i == best and n > 0))
            for i, (m, v, c, n) in enumerate(scored)]
