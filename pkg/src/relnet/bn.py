"""Discrete Bayesian networks and exact inference.

Nodes carry dense conditional probability tables laid out with one axis per
parent (in declared parent order) plus the child axis last.  Interval-valued
nodes keep their border grid and per-cell representative values alongside the
table so query results can be read back as densities or expectations.

Inference is variable elimination:

* irrelevant structure is pruned first (only ancestors of query and evidence
  nodes take part),
* hard findings slice CPT axes; set findings (a subset of allowed states)
  join as 0/1 indicator factors,
* the elimination order comes from a portfolio of greedy heuristics scored by
  a cheap cost simulation; when every greedy order still looks expensive (long
  chains sharing hazard parents defeat myopic heuristics) a rollout-lookahead
  search plus local-move refinement takes over, and the winning order is
  cached per scope pattern so repeated queries pay the search once,
* summing out a variable happens inside the einsum contraction, so a bucket's
  full product table is never materialized,
* every intermediate factor is renormalized and the log of the pulled-out
  constant is accumulated, so long chains stay in a safe numeric range while
  the evidence probability is still recovered exactly.

Impossible evidence raises ``ImpossibleEvidenceError`` rather than returning
NaNs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DiscreteNode",
    "DiscreteBN",
    "Factor",
    "Posterior",
    "ImpossibleEvidenceError",
    "evidence_fingerprint",
]


class ImpossibleEvidenceError(ValueError):
    """The supplied findings have probability zero under the model."""


@dataclass
class DiscreteNode:
    """One network node; ``table`` has shape (*parent_cards, own_card)."""

    name: str
    states: tuple[str, ...]
    parents: tuple[str, ...] = ()
    table: np.ndarray | None = None
    borders: np.ndarray | None = None   # interval nodes: len(states)+? see cells()
    reps: np.ndarray | None = None      # per-state representative values
    kind: str = "generic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = tuple(str(s) for s in self.states)
        self.parents = tuple(self.parents)
        if self.table is not None:
            self.table = np.asarray(self.table, dtype=float)
        if self.borders is not None:
            self.borders = np.asarray(self.borders, dtype=float)
        if self.reps is not None:
            self.reps = np.asarray(self.reps, dtype=float)

    @property
    def card(self) -> int:
        return len(self.states)

    def state_index(self, state) -> int:
        if isinstance(state, (int, np.integer)):
            idx = int(state)
            if not 0 <= idx < self.card:
                raise KeyError(f"{self.name}: state index {idx} out of range 0..{self.card - 1}")
            return idx
        try:
            return self.states.index(str(state))
        except ValueError:
            raise KeyError(f"{self.name}: unknown state {state!r}; states are {self.states}") from None

    def cells(self) -> list[tuple[float, float]] | None:
        """Interval view: borders b0..bn give [b_i, b_{i+1}) cells; one more
        state than gaps means the last state is the open tail [bn, inf)."""
        if self.borders is None:
            return None
        b = self.borders
        out = [(float(b[i]), float(b[i + 1])) for i in range(len(b) - 1)]
        if len(out) == self.card - 1:
            out.append((float(b[-1]), math.inf))
        return out


@dataclass(frozen=True)
class Factor:
    vars: tuple[str, ...]
    table: np.ndarray

    def reduce(self, name: str, index: int) -> "Factor":
        if name not in self.vars:
            return self
        ax = self.vars.index(name)
        return Factor(self.vars[:ax] + self.vars[ax + 1:], np.take(self.table, index, axis=ax))

    def marginalize(self, name: str) -> "Factor":
        ax = self.vars.index(name)
        return Factor(self.vars[:ax] + self.vars[ax + 1:], self.table.sum(axis=ax))


def _contract(factors: Sequence[Factor], keep: tuple[str, ...]) -> Factor:
    """Multiply ``factors`` and keep only the ``keep`` axes, summing the rest
    away inside the einsum so the full product table never exists."""
    order: list[str] = []
    for f in factors:
        for v in f.vars:
            if v not in order:
                order.append(v)
    if len(order) > 40:
        raise RuntimeError(f"factor product over {len(order)} variables; elimination order went wrong")
    letters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMN"
    sym = {v: letters[i] for i, v in enumerate(order)}
    lhs = ",".join("".join(sym[v] for v in f.vars) for f in factors)
    kept = tuple(v for v in order if v in set(keep))
    rhs = "".join(sym[v] for v in kept)
    table = np.einsum(f"{lhs}->{rhs}", *[f.table for f in factors], optimize=True)
    return Factor(kept, table)


def _multiply(factors: Sequence[Factor]) -> Factor:
    order: list[str] = []
    for f in factors:
        for v in f.vars:
            if v not in order:
                order.append(v)
    return _contract(factors, tuple(order))


class DiscreteBN:
    """Container with insertion-ordered nodes and parent/child indexes."""

    def __init__(self, nodes: Iterable[DiscreteNode]):
        self.nodes: dict[str, DiscreteNode] = {}
        for node in nodes:
            if node.name in self.nodes:
                raise ValueError(f"duplicate node {node.name!r}")
            self.nodes[node.name] = node
        self.children: dict[str, list[str]] = {n: [] for n in self.nodes}
        for node in self.nodes.values():
            for p in node.parents:
                if p not in self.nodes:
                    raise ValueError(f"{node.name!r} names missing parent {p!r}")
                self.children[p].append(node.name)
        # elimination orders keyed by (scope pattern, eliminated set); repeat
        # queries with the same structure skip the order search entirely
        self._order_cache: dict = {}

    def __contains__(self, name):
        return name in self.nodes

    def __getitem__(self, name) -> DiscreteNode:
        try:
            return self.nodes[name]
        except KeyError:
            raise KeyError(f"no node named {name!r}") from None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.nodes)

    def topological_order(self) -> list[str]:
        indeg = {n: len(node.parents) for n, node in self.nodes.items()}
        ready = sorted(n for n, d in indeg.items() if d == 0)
        out = []
        while ready:
            n = ready.pop(0)
            out.append(n)
            newly = []
            for c in self.children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    newly.append(c)
            ready = sorted(ready + newly)
        if len(out) != len(self.nodes):
            raise ValueError("the graph has a directed cycle")
        return out

    def validate(self, row_tol: float = 1e-9) -> list[str]:
        """Structural and numerical diagnostics; empty list means clean."""
        issues = []
        try:
            self.topological_order()
        except ValueError as e:
            issues.append(str(e))
        for name, node in self.nodes.items():
            want = tuple(self.nodes[p].card for p in node.parents if p in self.nodes) + (node.card,)
            if node.table is None:
                issues.append(f"{name}: missing table")
                continue
            if node.table.shape != want:
                issues.append(f"{name}: table shape {node.table.shape} != {want}")
                continue
            if not np.isfinite(node.table).all():
                issues.append(f"{name}: non-finite entries")
                continue
            if (node.table < -1e-15).any():
                issues.append(f"{name}: negative probabilities")
            rows = node.table.sum(axis=-1)
            worst = float(np.abs(rows - 1.0).max()) if rows.size else 0.0
            if worst > row_tol:
                issues.append(f"{name}: CPT rows sum off by up to {worst:.3e}")
            if node.borders is not None:
                ncells = len(node.borders) - 1
                if node.card not in (ncells, ncells + 1):
                    issues.append(f"{name}: {len(node.borders)} borders cannot label {node.card} states")
        return issues

    def ancestors_of(self, names: Iterable[str]) -> set[str]:
        seen = set()
        stack = list(names)
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self.nodes[n].parents)
        return seen

    # -- inference ------------------------------------------------------

    def _normalize_evidence(self, evidence: Mapping | None) -> dict:
        out = {}
        for name, finding in (evidence or {}).items():
            node = self[name]
            if isinstance(finding, (list, tuple, set, frozenset, np.ndarray)) and not isinstance(finding, str):
                arr = np.asarray(sorted(finding) if isinstance(finding, (set, frozenset)) else finding)
                if arr.dtype == bool:
                    mask = arr.astype(bool)
                    if mask.shape != (node.card,):
                        raise ValueError(f"{name}: boolean finding must have {node.card} entries")
                else:
                    mask = np.zeros(node.card, dtype=bool)
                    mask[[node.state_index(s) for s in arr.tolist()]] = True
                if not mask.any():
                    raise ImpossibleEvidenceError(f"{name}: empty set finding")
                if mask.all():
                    continue  # vacuous
                hits = np.flatnonzero(mask)
                out[name] = ("hard", int(hits[0])) if len(hits) == 1 else ("set", mask)
            else:
                out[name] = ("hard", node.state_index(finding))
        return out

    def _ve(self, queries: Sequence[str], evidence: Mapping | None):
        """Eliminate everything but ``queries``; returns (joint Factor,
        evidence probability)."""
        ev = self._normalize_evidence(evidence)
        for q in queries:
            if q in ev and ev[q][0] == "hard":
                raise ValueError(f"query node {q!r} already has a hard finding")
        relevant = self.ancestors_of(set(queries) | set(ev))
        factors = []
        for name in relevant:
            node = self[name]
            f = Factor(node.parents + (name,), node.table)
            for ev_name, (kind, val) in ev.items():
                if kind == "hard":
                    f = f.reduce(ev_name, val)
            if f.vars:
                factors.append(f)
            # fully-sliced factors are scalars; fold them into the constant
            elif f.table.size == 1:
                factors.append(Factor((), f.table))
        for name, (kind, val) in ev.items():
            if kind == "set" and name in relevant:
                factors.append(Factor((name,), val.astype(float)))

        log_z = 0.0
        consts = [f for f in factors if not f.vars]
        for c in consts:
            v = float(c.table)
            if v <= 0.0:
                raise ImpossibleEvidenceError("evidence has probability zero")
            log_z += math.log(v)
        factors = [f for f in factors if f.vars]

        hard_named = {n for n, (k, _) in ev.items() if k == "hard"}
        to_eliminate = {v for f in factors for v in f.vars} - set(queries) - hard_named
        scopes = [frozenset(f.vars) for f in factors]
        cache_key = (tuple(sorted(set(scopes), key=sorted)), tuple(sorted(to_eliminate)))
        order = self._order_cache.get(cache_key)
        if order is None:
            cards = {v: self[v].card for f in factors for v in f.vars}
            order = _elimination_order(scopes, cards, to_eliminate)
            self._order_cache[cache_key] = order
        for var in order:
            bucket = [f for f in factors if var in f.vars]
            rest = [f for f in factors if var not in f.vars]
            keep = tuple(dict.fromkeys(v for f in bucket for v in f.vars if v != var))
            prod = _contract(bucket, keep)
            total = float(prod.table.sum())
            if total <= 0.0:
                raise ImpossibleEvidenceError("evidence has probability zero")
            log_z += math.log(total)
            factors = rest + ([Factor(prod.vars, prod.table / total)] if prod.vars else [])
            if not prod.vars:
                continue
        joint = _multiply(factors) if factors else Factor((), np.array(1.0))
        # order axes to match the requested query order
        want = tuple(q for q in queries if q in joint.vars)
        if want != joint.vars:
            perm = [joint.vars.index(q) for q in want]
            joint = Factor(want, np.transpose(joint.table, perm))
        total = float(joint.table.sum())
        if total <= 0.0:
            raise ImpossibleEvidenceError("evidence has probability zero")
        return Factor(joint.vars, joint.table / total), math.exp(log_z + math.log(total))

    def evidence_probability(self, evidence: Mapping) -> float:
        if not self._normalize_evidence(evidence):
            return 1.0
        _, p = self._ve([], evidence)
        return p

    def posterior(self, query: str, evidence: Mapping | None = None) -> "Posterior":
        node = self[query]
        ev = dict(evidence or {})
        if query in ev:
            norm = self._normalize_evidence({query: ev.pop(query)})
            if norm and norm[query][0] == "hard":
                # posterior of an observed node is the point mass, scaled check
                rest_p = self.evidence_probability({**ev, query: norm[query][1]})
                probs = np.zeros(node.card)
                probs[norm[query][1]] = 1.0
                return Posterior(query, node.states, probs, rest_p, node)
            if norm:
                ev[query] = norm[query][1]
        joint, p_ev = self._ve([query], ev)
        if joint.vars != (query,):
            # query independent of everything kept: fall back to its marginal
            joint, p_ev2 = self._ve([query], None)
            p_ev = p_ev if ev else p_ev2
        return Posterior(query, node.states, np.asarray(joint.table, dtype=float), p_ev, node)

    def joint_posterior(self, queries: Sequence[str], evidence: Mapping | None = None):
        """Normalized joint over ``queries`` plus the evidence probability."""
        joint, p_ev = self._ve(list(queries), evidence)
        if set(joint.vars) != set(queries):
            # some query was independent and dropped; rebuild by outer product
            missing = [q for q in queries if q not in joint.vars]
            for q in missing:
                marg, _ = self._ve([q], evidence)
                joint = _multiply([joint, Factor((q,), marg.table)])
            perm = [joint.vars.index(q) for q in queries]
            joint = Factor(tuple(queries), np.transpose(joint.table, perm))
        return joint, p_ev


# Elimination-order selection.  Greedy heuristics are scored with a cheap
# symbolic simulation (largest and total bucket-product size, in table
# entries); the expensive search stages only run when every greedy order
# simulates above _ORDER_SEARCH_TRIGGER, and an order whose peak exceeds
# _ORDER_WORK_CAP is refused outright rather than letting numpy attempt a
# multi-GiB allocation.

_ORDER_SEARCH_TRIGGER = 1 << 27      # ~1.3e8 entries; fused contractions execute
                                     # smaller peaks in seconds, so the search
                                     # only pays when greedy is far off
_ORDER_WORK_CAP = 1 << 29            # ~5.4e8 entries: past this, give up


def _simulate_order(order: Sequence[str], scopes: Sequence[frozenset], cards: Mapping[str, int]) -> tuple[int, int]:
    """(peak, total) bucket-product sizes the order would create."""
    live = [set(s) for s in scopes]
    peak = total = 0
    for var in order:
        bucket = [s for s in live if var in s]
        if not bucket:
            continue
        merged = set().union(*bucket)
        work = math.prod(cards[v] for v in merged)
        if work > peak:
            peak = work
        total += work
        merged.discard(var)
        live = [s for s in live if var not in s]
        if merged:
            live.append(merged)
    return peak, total


def _greedy_order(scopes: Sequence[frozenset], cards: Mapping[str, int], eliminate: set, metric: str) -> list[str]:
    """Greedy elimination under one of the classic scoring rules; ties break
    lexicographically so results are reproducible."""
    adj: dict[str, set] = {}
    for scope in scopes:
        for v in scope:
            adj.setdefault(v, set()).update(scope - {v})
    order = []
    remaining = set(eliminate)
    while remaining:
        best, best_score = None, None
        for v in sorted(remaining):
            nbrs = [u for u in adj.get(v, ()) if u in adj]
            if metric == "weight":
                score = cards[v] * math.prod(cards[u] for u in nbrs)
            elif metric == "degree":
                score = len(nbrs)
            else:   # fill / weighted fill
                fill = wfill = 0
                for i, a in enumerate(nbrs):
                    for b in nbrs[i + 1:]:
                        if b not in adj[a]:
                            fill += 1
                            wfill += cards[a] * cards[b]
                score = fill if metric == "fill" else wfill
            if best_score is None or score < best_score:
                best, best_score = v, score
        nbrs = [u for u in adj.get(best, ()) if u in adj and u != best]
        for i, a in enumerate(nbrs):
            for b in nbrs[i + 1:]:
                adj[a].add(b)
                adj[b].add(a)
        for u in nbrs:
            adj[u].discard(best)
        adj.pop(best, None)
        remaining.discard(best)
        order.append(best)
    return order


def _lookahead_order(scopes: Sequence[frozenset], cards: Mapping[str, int], eliminate: set) -> list[str]:
    """One-step lookahead: pick, at every step, the variable whose greedy
    completion simulates cheapest.  Quadratic in practice but only runs when
    the cheap portfolio failed, and chain graphs reward it hugely: a locally
    expensive hazard-node elimination avoids welding chain neighbours into
    ever-growing cliques."""
    live = [frozenset(s) for s in scopes]
    remaining = set(eliminate)
    order: list[str] = []
    while remaining:
        best = None
        for v in sorted(remaining):
            bucket = [s for s in live if v in s]
            merged = set().union(*bucket) if bucket else {v}
            first = math.prod(cards[u] for u in merged)
            nxt = [s for s in live if v not in s]
            reduced = frozenset(merged - {v})
            if reduced:
                nxt.append(reduced)
            rest = remaining - {v}
            tail = _greedy_order(nxt, cards, rest, "weight")
            peak, total = _simulate_order(tail, nxt, cards)
            key = (max(first, peak), first + total, v)
            if best is None or key < best[0]:
                best = (key, v, reduced)
        _, v, reduced = best
        order.append(v)
        live = [s for s in live if v not in s]
        if reduced:
            live.append(reduced)
        remaining.discard(v)
    return order


def _refine_order(order: list[str], scopes: Sequence[frozenset], cards: Mapping[str, int], seed: int, iters: int) -> list[str]:
    """Local search over insertion moves, keeping any move that does not make
    the simulated (peak, total) cost worse."""
    rng = np.random.default_rng(seed)
    cur = list(order)
    cost = _simulate_order(cur, scopes, cards)
    n = len(cur)
    if n < 3:
        return cur
    for i, j in rng.integers(0, n, size=(iters, 2)).tolist():
        if i == j:
            continue
        cand = list(cur)
        cand.insert(i, cand.pop(j))
        c = _simulate_order(cand, scopes, cards)
        if c <= cost:
            cur, cost = cand, c
    return cur


def _elimination_order(scopes: Sequence[frozenset], cards: Mapping[str, int], eliminate: set) -> list[str]:
    if not eliminate:
        return []
    ranked: list[tuple[tuple[int, int], tuple[str, ...]]] = []

    def consider(order):
        ranked.append((_simulate_order(order, scopes, cards), tuple(order)))
        ranked.sort()

    for metric in ("fill", "wfill", "weight", "degree"):
        consider(_greedy_order(scopes, cards, eliminate, metric))
    if ranked[0][0][0] > _ORDER_SEARCH_TRIGGER:
        if len(eliminate) <= 96:
            consider(_lookahead_order(scopes, cards, eliminate))
        iters = min(4000, 60 * len(eliminate))
        for seed in (0, 1):
            consider(_refine_order(list(ranked[0][1]), scopes, cards, seed, iters))
    (peak, _), best = ranked[0]
    if peak > _ORDER_WORK_CAP:
        raise RuntimeError(
            f"exact inference needs a {peak:.2e}-entry intermediate table even "
            "after order search; the query couples too much of the network")
    return list(best)


@dataclass
class Posterior:
    node: str
    states: tuple[str, ...]
    probs: np.ndarray
    evidence_probability: float
    _node: DiscreteNode | None = None

    def __getitem__(self, state) -> float:
        if self._node is not None:
            return float(self.probs[self._node.state_index(state)])
        return float(self.probs[list(self.states).index(str(state))])

    def mean(self) -> float:
        """Expectation using the node's representative values."""
        if self._node is None or self._node.reps is None:
            raise ValueError(f"{self.node} has no representative values")
        return float(self.probs @ self._node.reps)

    def density(self) -> list[dict]:
        """Interval view: per-cell mass and (for bounded cells) density."""
        cells = self._node.cells() if self._node is not None else None
        if cells is None:
            raise ValueError(f"{self.node} is not an interval node")
        out = []
        for (lo, hi), p, label in zip(cells, self.probs, self.states):
            width = hi - lo
            out.append({
                "state": label,
                "lower": lo,
                "upper": hi,
                "mass": float(p),
                "density": float(p / width) if math.isfinite(width) else None,
            })
        return out


def evidence_fingerprint(evidence: Mapping | None) -> str:
    """Stable key for caching query results under identical findings."""
    import hashlib

    parts = []
    for name in sorted(evidence or {}):
        finding = evidence[name]
        if isinstance(finding, (list, tuple, set, frozenset, np.ndarray)) and not isinstance(finding, str):
            arr = np.asarray(sorted(finding) if isinstance(finding, (set, frozenset)) else finding)
            body = ",".join(map(str, arr.tolist()))
        else:
            body = str(finding)
        parts.append(f"{name}={body}")
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]
