"""Reduce hybrid reliability models to purely discrete Bayesian networks.

``compile_model`` walks the node list of a :class:`~relnet.scenarios.ModelSpec`
and produces one conditional probability table per node: grid solves through
the structural-reliability layer for system-failure and capacity nodes,
quadrature or closed forms for everything else.  The result bundles the
discrete network, a build report (solve tallies, fallbacks, quadrature gaps),
and a canonical JSON document that ``save_rbn``/``load_rbn`` round-trip.
Compiling the same model twice yields byte-identical files.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import dists
from .bn import DiscreteBN, DiscreteNode
from .discretize import CoverageError, IntervalScheme
from .expr import parse
from .scenarios import ModelSpec
from .srm import FormOptions, ReliabilityProblem, form_series, mcs

__all__ = ["CompileError", "CompiledModel", "compile_model", "continuous_problem",
           "save_rbn", "load_rbn"]

_GRID_CHUNK = 1024        # fixed chunk size so the worker count never changes results
_MCS_FALLBACK_N = 100_000
_MONOTONE_TOL = 1e-4      # largest tolerated CDF backstep before compilation fails
_QUAD_TOL = 1e-6          # required 16- vs 32-point Gauss-Legendre agreement
_FALLBACK_LIST_CAP = 32   # cap on per-node fallback details kept in the report


class CompileError(RuntimeError):
    """A node table could not be built to tolerance."""


# ---------- small numeric helpers ----------

def _leggauss01(n: int):
    """Gauss-Legendre nodes/weights on (0, 1); weights sum to one."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _masses_from_cdf(c: np.ndarray) -> np.ndarray:
    """Interval masses from CDF values at the scheme borders (last axis).

    Mass below the first border is folded into state 0; the last state is the
    open tail.  Output shape equals the input shape.
    """
    out = np.empty_like(c)
    out[..., 0] = c[..., 1]
    out[..., 1:-1] = c[..., 2:] - c[..., 1:-1]
    out[..., -1] = 1.0 - c[..., -1]
    return out


def _clean_rows(table: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    """Clip quadrature dust, renormalize rows; large negatives are an error."""
    low = float(table.min()) if table.size else 0.0
    if low < -1e-9:
        raise CompileError(f"{what}: negative probability {low:.3e}")
    clipped = np.clip(table, 0.0, None)
    sums = clipped.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise CompileError(f"{what}: a table row has zero total mass")
    return clipped / sums, max(0.0, -low)


def _refine(rows: Callable[[int], np.ndarray], what: str) -> tuple[np.ndarray, float, int]:
    """Escalate Gauss-Legendre order until successive answers agree."""
    coarse = rows(16)
    gap = math.inf
    for order in (32, 64, 128):
        fine = rows(order)
        gap = float(np.max(np.abs(coarse - fine)))
        if gap <= _QUAD_TOL:
            return fine, gap, order
        coarse = fine
    raise CompileError(f"{what}: quadrature disagrees by {gap:.2e} at order 128")


def _arr(a) -> list[float]:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def _key(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


_DENSITY_FAMILIES = {
    "gumbel": dists.Gumbel,
    "normal": dists.Normal,
    "lognormal": dists.Lognormal,
}


# ---------- compile context ----------

@dataclass
class _Ctx:
    spec: ModelSpec
    workers: int
    seed: int
    progress: Callable[[str], None]
    nodes: dict[str, DiscreteNode] = field(default_factory=dict)
    entries: dict[str, dict] = field(default_factory=dict)
    cache: dict[str, tuple[str, dict]] = field(default_factory=dict)

    def node(self, name: str) -> DiscreteNode:
        try:
            return self.nodes[name]
        except KeyError:
            raise CompileError(f"node {name!r} referenced before it was built") from None

    def cached(self, key: str):
        return self.cache.get(key)

    def store(self, key: str, owner: str, payload: dict):
        self.cache[key] = (owner, payload)


def _interval_parent(ctx: _Ctx, name: str, for_node: str) -> DiscreteNode:
    node = ctx.node(name)
    if node.borders is None or node.reps is None:
        raise CompileError(f"{for_node}: parent {name!r} is not an interval node")
    return node


def _binary_parent(ctx: _Ctx, name: str, for_node: str) -> DiscreteNode:
    node = ctx.node(name)
    if "fail" not in node.states or "survive" not in node.states:
        raise CompileError(f"{for_node}: parent {name!r} lacks fail/survive states")
    return node


def _fail_survive(ns: dict, name: str) -> tuple[tuple[str, ...], int, int]:
    states = tuple(ns.get("states", ("fail", "survive")))
    if "fail" not in states or "survive" not in states:
        raise CompileError(f"{name}: states must include 'fail' and 'survive'")
    return states, states.index("fail"), states.index("survive")


def _scheme_for(ctx: _Ctx, ns: dict, name: str) -> IntervalScheme:
    scheme = ctx.spec.scheme(ns["scheme"])
    if not scheme.tail:
        raise CompileError(f"{name}: scheme {ns['scheme']!r} needs an open tail state")
    return scheme


# ---------- structural-reliability grids ----------

def _series_problem(spec: ModelSpec, mode_names: Sequence[str], pin_syms: Sequence[str],
                    rand_pins: Sequence[str]) -> ReliabilityProblem:
    """Assemble the series-system problem for a set of limit states.

    ``pin_syms`` are non-random placeholder symbols (capacity thresholds);
    ``rand_pins`` are declared random variables pinned per grid cell.
    """
    exprs = {}
    for m in mode_names:
        if m not in spec.limit_states:
            raise CompileError(f"unknown limit state {m!r}")
        exprs[m] = parse(spec.limit_states[m])
    free = set().union(*(e.free_vars for e in exprs.values()))
    groups, grouped = [], set()
    for gname in sorted(spec.factor_groups):
        g = spec.factor_groups[gname]
        if free & set(g["members"]):
            members = {v: spec.distribution(v) for v in g["members"]}
            groups.append(dists.CommonFactorGroup(members, g["correlation"]))
            grouped |= set(g["members"])
    indep = {v: spec.distribution(v)
             for v in sorted(free - grouped - set(pin_syms))}
    problem = ReliabilityProblem(independents=indep, limit_states=exprs,
                                 factor_groups=tuple(groups),
                                 fixed={s: 0.0 for s in pin_syms})
    if rand_pins:
        problem = problem.pin({v: 1.0 for v in rand_pins}, mode=spec.pinning_mode)
    return problem


def continuous_problem(spec: ModelSpec, modes: Sequence[str] | None = None) -> ReliabilityProblem:
    """Continuous-space series problem over the declared limit states —
    the same assembly the cell solves use, without any pinning.  Monte Carlo
    on it is the independent arbiter for verifying a compiled network."""
    names = list(modes) if modes else sorted(spec.limit_states)
    return _series_problem(spec, names, [], [])


def _series_key(spec: ModelSpec, mode_names: Sequence[str], pin_syms: Sequence[str],
                pins: Mapping[str, np.ndarray]) -> str:
    """Cache key for a grid solve, invariant under variable renaming.

    Symbols are replaced positionally (first appearance across the canonical
    mode expressions) so structurally identical solves from repeated template
    blocks collapse onto one computation.
    """
    sources = [parse(spec.limit_states[m]).to_string() for m in mode_names]
    names = set()
    for src in sources:
        names |= parse(src).free_vars
    pat = re.compile("|".join(rf"\b{re.escape(n)}\b"
                              for n in sorted(names, key=len, reverse=True)))
    rename: dict[str, str] = {}

    def alias(mo):
        n = mo.group(0)
        if n not in rename:
            rename[n] = f"v{len(rename)}"
        return rename[n]

    canon = [pat.sub(alias, src) for src in sources]
    roles = []
    for n in sorted(rename, key=lambda n: int(rename[n][1:])):
        if n in pin_syms:
            roles.append([rename[n], "threshold"])
        else:
            hit = spec.factor_group_of(n) if n in spec.variables else None
            if hit is not None:
                gname, g = hit
                roles.append([rename[n], "factor", gname and sorted(spec.factor_groups).index(gname),
                              g["correlation"], spec.distribution(n).to_spec()])
            elif n in spec.variables:
                roles.append([rename[n], "independent", spec.distribution(n).to_spec()])
            else:
                raise CompileError(f"limit state symbol {n!r} is neither a variable nor a pin")
    return _key({"kind": "series-grid", "modes": canon, "roles": roles,
                 "pin_mode": spec.pinning_mode,
                 "grids": {rename[n]: _arr(v) for n, v in pins.items()}})


# curvature-corrected component solves: the tables must track our own Monte
# Carlo of the same model, and first-order betas alone bias the bulk cells
_FORM_OPTIONS = FormOptions(curvature=True)


def _series_chunk(args):
    problem, modes, pins = args
    grid = form_series(problem, modes=modes, pins=pins, options=_FORM_OPTIONS)
    return np.asarray(grid.pf, float), np.asarray(grid.all_converged, bool)


def _solve_series_grid(problem: ReliabilityProblem, mode_names: Sequence[str],
                       pins: Mapping[str, np.ndarray], workers: int):
    m = len(next(iter(pins.values())))
    slices = [slice(i, min(i + _GRID_CHUNK, m)) for i in range(0, m, _GRID_CHUNK)]
    if workers <= 1 or len(slices) == 1:
        return _series_chunk((problem, list(mode_names), dict(pins)))
    pf = np.empty(m)
    conv = np.empty(m, dtype=bool)
    args = [(problem, list(mode_names), {k: np.asarray(v)[sl] for k, v in pins.items()})
            for sl in slices]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        for sl, (p, c) in zip(slices, ex.map(_series_chunk, args)):
            pf[sl], conv[sl] = p, c
    return pf, conv


def _grid_pf(ctx: _Ctx, name: str, mode_names: Sequence[str], pin_syms: Sequence[str],
             rand_pins: Sequence[str], pins: Mapping[str, np.ndarray]) -> tuple[np.ndarray, dict]:
    """Per-cell series failure probabilities with caching and MCS fallback."""
    key = _series_key(ctx.spec, mode_names, pin_syms, pins)
    hit = ctx.cached(key)
    if hit is not None:
        owner, payload = hit
        entry = {"solves": 0, "reused_from": owner,
                 "non_converged": payload["non_converged"]}
        return payload["pf"], entry
    problem = _series_problem(ctx.spec, mode_names, pin_syms, rand_pins)
    pf, conv = _solve_series_grid(problem, mode_names, pins, ctx.workers)
    fallbacks = []
    if not conv.all():
        base = _series_problem(ctx.spec, mode_names, pin_syms, [])
        for flat in np.flatnonzero(~conv):
            cell_fixed = {s: float(pins[s][flat]) for s in pin_syms}
            cell_pins = {v: float(pins[v][flat]) for v in rand_pins}
            prob = dataclasses.replace(base, fixed={**base.fixed, **cell_fixed})
            if cell_pins:
                prob = prob.pin(cell_pins, mode=ctx.spec.pinning_mode)
            r = mcs(prob, list(mode_names), n=_MCS_FALLBACK_N,
                    seed=ctx.seed, solve_id=int(flat))
            pf[flat] = r.pf
            if len(fallbacks) < _FALLBACK_LIST_CAP:
                fallbacks.append({"cell": int(flat),
                                  "pins": {k: float(pins[k][flat]) for k in pins},
                                  "pf": float(r.pf)})
    entry = {"solves": int(pf.size), "non_converged": int((~conv).sum())}
    if fallbacks:
        entry["mcs_fallback"] = fallbacks
    ctx.store(key, name, {"pf": pf, "non_converged": entry["non_converged"]})
    return pf, entry


# ---------- node builders ----------

def _build_marginal(ctx: _Ctx, ns: dict):
    name = ns["name"]
    scheme = _scheme_for(ctx, ns, name)
    dist = ctx.spec.distribution(ns["variable"])
    try:
        table = scheme.pmf(dist)
    except CoverageError as e:
        raise CompileError(f"{name}: {e}") from None
    reps = scheme.representatives(dist)
    node = DiscreteNode(name, scheme.labels(), parents=(), table=table,
                        borders=scheme.borders, reps=reps, kind="marginal",
                        meta={"variable": ns["variable"], "scheme": ns["scheme"]})
    return node, {"solver": "closed_form", "cells": 1}


def _member_cell_probs(u: np.ndarray, z_lo: np.ndarray, z_hi: np.ndarray,
                       sq_rho: float, sq_idio: float) -> np.ndarray:
    """P(member in each interval | shared factor u); (nu, nstates)."""
    lo = (z_lo[None, :] - sq_rho * u[:, None]) / sq_idio
    hi = (z_hi[None, :] - sq_rho * u[:, None]) / sq_idio
    return dists.std_normal_cdf(hi) - dists.std_normal_cdf(lo)


def _build_factor_sibling(ctx: _Ctx, ns: dict):
    name = ns["name"]
    given = ctx.node(ns["given"])
    if given.kind != "marginal":
        raise CompileError(f"{name}: 'given' must point at a marginal interval node")
    var_b = ns["variable"]
    var_a = given.meta["variable"]
    hit = ctx.spec.factor_group_of(var_b)
    if hit is None or var_a not in hit[1]["members"]:
        raise CompileError(f"{name}: {var_a!r} and {var_b!r} do not share a factor group")
    rho = float(hit[1]["correlation"])
    da, db = ctx.spec.distribution(var_a), ctx.spec.distribution(var_b)
    sa = ctx.spec.scheme(given.meta["scheme"])
    sb = _scheme_for(ctx, ns, name)
    key = _key({"kind": "factor_sibling", "rho": rho, "a": da.to_spec(), "b": db.to_spec(),
                "ba": _arr(sa.borders), "bb": _arr(sb.borders)})
    hitc = ctx.cached(key)
    if hitc is not None:
        owner, payload = hitc
        table = payload["table"]
        entry = {"solver": "quadrature", "cells": given.card, "reused_from": owner}
    else:
        def z_bounds(dist, scheme):
            z = (np.log(scheme.borders) - dist.log_mean) / dist.log_std
            lo = np.concatenate([[-np.inf], z[1:]])
            hi = np.concatenate([z[1:], [np.inf]])
            return lo, hi

        sq_rho, sq_idio = math.sqrt(rho), math.sqrt(1.0 - rho)
        za = z_bounds(da, sa)
        zb = z_bounds(db, sb)
        joint = np.zeros((sa.n_states, sb.n_states))
        # composite panels resolve the normal factor density out to +-8.5
        x32, w32 = np.polynomial.legendre.leggauss(32)
        for lo_u, hi_u in ((-8.5, -4.0), (-4.0, 0.0), (0.0, 4.0), (4.0, 8.5)):
            u = 0.5 * (hi_u - lo_u) * x32 + 0.5 * (hi_u + lo_u)
            wu = 0.5 * (hi_u - lo_u) * w32 * dists.std_normal_pdf(u)
            pa = _member_cell_probs(u, *za, sq_rho, sq_idio)
            pb = _member_cell_probs(u, *zb, sq_rho, sq_idio)
            joint += np.einsum("n,na,nb->ab", wu, pa, pb)
        row_mass = joint.sum(axis=1)
        direct = sa.pmf(da)
        gap = float(np.max(np.abs(row_mass - direct)))
        if gap > 1e-6:
            raise CompileError(f"{name}: factor quadrature off by {gap:.2e} "
                               "against the closed-form marginal")
        table, _ = _clean_rows(joint / row_mass[:, None], name)
        ctx.store(key, name, {"table": table})
        entry = {"solver": "quadrature", "cells": given.card, "quadrature_gap": gap}
    reps = sb.representatives(db)
    node = DiscreteNode(name, sb.labels(), parents=(ns["given"],), table=table,
                        borders=sb.borders, reps=reps, kind="factor_sibling",
                        meta={"variable": var_b, "scheme": ns["scheme"]})
    return node, entry


def _build_measurement(ctx: _Ctx, ns: dict):
    name = ns["name"]
    parent = _interval_parent(ctx, ns["parent"], name)
    noise = ctx.spec.distribution(ns["noise"])
    scheme = _scheme_for(ctx, ns, name)
    key = _key({"kind": "measurement", "noise": noise.to_spec(),
                "borders": _arr(scheme.borders), "reps": _arr(parent.reps)})
    hit = ctx.cached(key)
    if hit is not None:
        owner, payload = hit
        table = payload["table"]
        entry = {"solver": "closed_form", "cells": parent.card, "reused_from": owner}
    else:
        c = noise.cdf(scheme.borders[None, :] - parent.reps[:, None])
        table, _ = _clean_rows(_masses_from_cdf(c), name)
        ctx.store(key, name, {"table": table})
        entry = {"solver": "closed_form", "cells": parent.card}
    node = DiscreteNode(name, scheme.labels(), parents=(ns["parent"],), table=table,
                        borders=scheme.borders, reps=scheme.midpoints(),
                        kind="measurement", meta={"scheme": ns["scheme"], "noise": ns["noise"]})
    return node, entry


def _pin_grid(parents: Sequence[DiscreteNode], extra: Sequence[np.ndarray] = ()):
    axes = [np.asarray(p.reps, dtype=float) for p in parents]
    axes += [np.asarray(a, dtype=float) for a in extra]
    grids = np.meshgrid(*axes, indexing="ij") if axes else []
    return [g.ravel() for g in grids]


def _within_cell_variances(ctx: _Ctx, parent: DiscreteNode) -> np.ndarray:
    dist = ctx.spec.distribution(parent.meta["variable"])
    return ctx.spec.scheme(parent.meta["scheme"]).cell_moments(dist)[1]


def _jensen_adjust(ctx: _Ctx, pf: np.ndarray, parents: Sequence[DiscreteNode]) -> np.ndarray:
    """Within-cell correction: a cell's entry should be E[pf | cell], not
    pf(representative).  To second order the gap is 0.5 Var[X|cell] f'' per
    parent axis, with f'' taken as non-uniform three-point differences of
    the solved grid itself.  Edge states keep the plain representative value;
    cross terms are dropped as below the grid's resolution.
    """
    base = np.asarray(pf, dtype=float)
    out = base.copy()
    for ax, parent in enumerate(parents):
        n = base.shape[ax]
        if n < 3:
            continue
        var = _within_cell_variances(ctx, parent)
        r = np.asarray(parent.reps, dtype=float)
        f = np.moveaxis(base, ax, 0)
        trail = (1,) * (f.ndim - 1)
        h1 = (r[1:-1] - r[:-2]).reshape((-1,) + trail)
        h2 = (r[2:] - r[1:-1]).reshape((-1,) + trail)
        d2 = 2.0 * ((f[2:] - f[1:-1]) / h2 - (f[1:-1] - f[:-2]) / h1) / (h1 + h2)
        tgt = np.moveaxis(out, ax, 0)
        tgt[1:-1] += 0.5 * var[1:-1].reshape((-1,) + trail) * d2
    return np.clip(out, 0.0, 1.0)


def _build_system_failure(ctx: _Ctx, ns: dict):
    name = ns["name"]
    states, i_fail, i_surv = _fail_survive(ns, name)
    parents = [_interval_parent(ctx, p, name) for p in ns["parents"]]
    if not parents:
        raise CompileError(f"{name}: system_failure needs at least one parent")
    rand = [p.meta.get("variable") for p in parents]
    if any(v is None for v in rand):
        raise CompileError(f"{name}: every parent must carry a model variable")
    flats = _pin_grid(parents)
    pins = dict(zip(rand, flats))
    pf, entry = _grid_pf(ctx, name, ns["modes"], [], rand, pins)
    shape = tuple(p.card for p in parents)
    grid = _jensen_adjust(ctx, pf.reshape(shape), parents)
    table = np.empty(shape + (2,))
    table[..., i_fail] = grid
    table[..., i_surv] = 1.0 - grid
    entry.update({"solver": "form_series", "cells": int(np.prod(shape)),
                  "modes": list(ns["modes"]),
                  "within_cell_shift": float(np.max(np.abs(grid - pf.reshape(shape))))})
    node = DiscreteNode(name, states, parents=tuple(ns["parents"]), table=table,
                        kind="system_failure", meta={"modes": list(ns["modes"])})
    return node, entry


def _build_capacity_cdf(ctx: _Ctx, ns: dict):
    name = ns["name"]
    scheme = _scheme_for(ctx, ns, name)
    pin_sym = ns["pin"]
    parents = [_interval_parent(ctx, p, name) for p in ns["parents"]]
    rand = [p.meta.get("variable") for p in parents]
    if any(v is None for v in rand):
        raise CompileError(f"{name}: every parent must carry a model variable")
    flats = _pin_grid(parents, extra=[scheme.borders])
    pins = dict(zip(rand + [pin_sym], flats))
    pf, entry = _grid_pf(ctx, name, ns["modes"], [pin_sym], rand, pins)
    shape = tuple(p.card for p in parents) + (len(scheme.borders),)
    F = _jensen_adjust(ctx, pf.reshape(shape), parents)
    backstep = float(np.max(np.maximum(F[..., :-1] - F[..., 1:], 0.0))) if F.shape[-1] > 1 else 0.0
    if backstep > _MONOTONE_TOL:
        raise CompileError(f"{name}: capacity CDF decreases by {backstep:.2e} "
                           "along the threshold axis")
    # per-threshold solves are independent, so dust-sized backsteps survive the
    # check above; iron them flat before differencing into masses
    F = np.maximum.accumulate(F, axis=-1)
    table, clamp = _clean_rows(_masses_from_cdf(F), name)
    entry.update({"solver": "form_series", "cells": int(np.prod(shape[:-1], dtype=int)),
                  "levels": len(scheme.borders), "modes": list(ns["modes"]),
                  "max_cdf_backstep": backstep, "max_clamp": clamp})
    node = DiscreteNode(name, scheme.labels(), parents=tuple(ns["parents"]), table=table,
                        borders=scheme.borders, reps=scheme.midpoints(),
                        kind="capacity_cdf", meta={"scheme": ns["scheme"], "pin": pin_sym})
    return node, entry


def _build_conditional_density(ctx: _Ctx, ns: dict):
    name = ns["name"]
    parent = _interval_parent(ctx, ns["parent"], name)
    pvar = parent.meta.get("variable")
    if pvar is None:
        raise CompileError(f"{name}: parent {ns['parent']!r} must carry a model variable")
    pdist = ctx.spec.distribution(pvar)
    scheme = _scheme_for(ctx, ns, name)
    family = ns["family"]
    if family not in _DENSITY_FAMILIES:
        raise CompileError(f"{name}: unsupported family {family!r}")
    params = dict(ns["params"])
    bind = dict(ns["bind"])
    if len(bind) != 1 or set(bind.values()) != {"parent_value"}:
        raise CompileError(f"{name}: bind must map exactly one parameter to 'parent_value'")
    (target,) = bind.keys()
    key = _key({"kind": "conditional_density", "family": family, "params": params,
                "target": target, "pdist": pdist.to_spec(),
                "pborders": _arr(parent.borders), "borders": _arr(scheme.borders)})
    hit = ctx.cached(key)
    if hit is not None:
        owner, payload = hit
        table, entry = payload["table"], {"solver": "quadrature", "cells": parent.card,
                                          "reused_from": owner}
    else:
        F = pdist.cdf(parent.borders)
        p_lo = np.concatenate([[0.0], F[1:]])      # state 0 folds mass below the grid
        p_hi = np.concatenate([F[1:], [1.0]])      # last state owns the open tail

        def rows(order):
            x, w = _leggauss01(order)
            out = np.empty((parent.card, scheme.n_states))
            for i in range(parent.card):
                if p_hi[i] - p_lo[i] < 1e-300:
                    p = np.array([0.5 * (p_lo[i] + p_hi[i])])
                    wts = np.array([1.0])
                else:
                    p = p_lo[i] + (p_hi[i] - p_lo[i]) * x
                    wts = w
                vals = pdist.quantile(np.clip(p, 1e-300, 1.0 - 1e-16))
                d = _DENSITY_FAMILIES[family](**{**params, target: np.asarray(vals)[:, None]})
                c = np.asarray(d.cdf(scheme.borders[None, :]))
                out[i] = wts @ _masses_from_cdf(c)
            return out

        fine, gap, order = _refine(rows, name)
        table, _ = _clean_rows(fine, name)
        ctx.store(key, name, {"table": table})
        entry = {"solver": "quadrature", "cells": parent.card,
                 "quadrature_gap": gap, "quadrature_order": order}
    node = DiscreteNode(name, scheme.labels(), parents=(ns["parent"],), table=table,
                        borders=scheme.borders, reps=scheme.midpoints(),
                        kind="conditional_density", meta={"scheme": ns["scheme"]})
    return node, entry


def _aligned_exceed_core(n_states: int) -> np.ndarray:
    """P(load >= capacity) for identical interval partitions.

    Cells are pairwise identical or disjoint, so the comparison is exact:
    strictly lower capacity cell fails surely, higher survives surely, and a
    shared cell (uniform, independent) fails with probability one half.  The
    two open tails compare as one half by the same convention.
    """
    qi = np.arange(n_states)[:, None]
    hj = np.arange(n_states)[None, :]
    return np.where(qi < hj, 1.0, 0.0) + 0.5 * (qi == hj)


def _scaled_exceed_core(cap: DiscreteNode, load: DiscreteNode, scale, order: int) -> np.ndarray:
    """P(load * X >= capacity) integrating X out; uniform within bounded cells,
    representative points for the open tails."""
    def sf(r):
        return 1.0 - np.asarray(scale.cdf(r))

    x, w = _leggauss01(order)
    cb, lb = cap.borders, load.borders
    q_pts = cb[:-1, None] + (cb[1:] - cb[:-1])[:, None] * x[None, :]   # bounded cap cells
    h_pts = lb[:-1, None] + (lb[1:] - lb[:-1])[:, None] * x[None, :]
    q_tail = float(cap.reps[-1])
    h_tail = float(load.reps[-1])
    nc, nl = cap.card, load.card
    core = np.empty((nc, nl))
    # one capacity cell at a time keeps the ratio tensor small at high order
    for a in range(nc - 1):
        ratio = q_pts[a][:, None, None] / h_pts[None, :, :]
        core[a, :-1] = np.einsum("i,j,ibj->b", w, w, sf(ratio))
    core[-1, :-1] = np.einsum("j,bj->b", w, sf(q_tail / h_pts))
    core[:-1, -1] = np.einsum("i,ai->a", w, sf(q_pts / h_tail))
    core[-1, -1] = sf(q_tail / h_tail)
    return core


def _build_exceedance(ctx: _Ctx, ns: dict):
    name = ns["name"]
    states, i_fail, i_surv = _fail_survive(ns, name)
    cap = _interval_parent(ctx, ns["capacity"], name)
    load = _interval_parent(ctx, ns["load"], name)
    scale = ctx.spec.distribution(ns["scale"]) if "scale" in ns else None
    key = _key({"kind": "exceedance", "cb": _arr(cap.borders), "lb": _arr(load.borders),
                "creps": _arr(cap.reps), "lreps": _arr(load.reps),
                "scale": scale.to_spec() if scale is not None else None})
    hit = ctx.cached(key)
    entry: dict = {"cells": cap.card * load.card}
    if hit is not None:
        owner, payload = hit
        core = payload["core"]
        entry["reused_from"] = owner
        entry["solver"] = payload["solver"]
    elif scale is None:
        if not np.array_equal(cap.borders, load.borders):
            raise CompileError(f"{name}: unscaled comparison needs matching "
                               "capacity and load partitions")
        core = _aligned_exceed_core(cap.card)
        entry["solver"] = "closed_form"
        ctx.store(key, name, {"core": core, "solver": "closed_form"})
    else:
        core, gap, order = _refine(
            lambda o: _scaled_exceed_core(cap, load, scale, o), name)
        entry["solver"] = "quadrature"
        entry["quadrature_gap"] = gap
        entry["quadrature_order"] = order
        ctx.store(key, name, {"core": core, "solver": "quadrature"})

    parents = [ns["capacity"], ns["load"]]
    if "previous" in ns:
        prev = _binary_parent(ctx, ns["previous"], name)
        parents.append(ns["previous"])
        p_fail = prev.states.index("fail")
        p_surv = prev.states.index("survive")
        table = np.empty((cap.card, load.card, prev.card, 2))
        table[:, :, p_fail, i_fail] = 1.0      # failure is absorbing
        table[:, :, p_fail, i_surv] = 0.0
        table[:, :, p_surv, i_fail] = core
        table[:, :, p_surv, i_surv] = 1.0 - core
    else:
        table = np.empty((cap.card, load.card, 2))
        table[..., i_fail] = core
        table[..., i_surv] = 1.0 - core
    node = DiscreteNode(name, states, parents=tuple(parents), table=table,
                        kind="exceedance", meta={})
    return node, entry


def _build_fragility(ctx: _Ctx, ns: dict):
    name = ns["name"]
    states, i_fail, i_surv = _fail_survive(ns, name)
    load = _interval_parent(ctx, ns["load"], name)
    lam, zeta = float(ns["log_median"]), float(ns["log_std"])
    mu_x, var_x = 0.0, 0.0
    if "scale" in ns:
        scale = ctx.spec.distribution(ns["scale"])
        if scale.family != "lognormal":
            raise CompileError(f"{name}: load scale must be lognormal to fold "
                               "into the fragility curve")
        mu_x, var_x = scale.log_mean, scale.log_std**2
    denom = math.sqrt(zeta**2 + var_x)
    key = _key({"kind": "fragility", "lam": lam, "zeta": zeta, "mu_x": mu_x,
                "var_x": var_x, "lb": _arr(load.borders), "lreps": _arr(load.reps)})
    hit = ctx.cached(key)
    if hit is not None:
        owner, payload = hit
        pf, entry = payload["pf"], {"solver": "closed_form", "cells": load.card,
                                    "reused_from": owner}
    else:
        def curve(h):
            h = np.maximum(np.asarray(h, dtype=float), 1e-300)
            return dists.std_normal_cdf((np.log(h) + mu_x - lam) / denom)

        def rows(order):
            x, w = _leggauss01(order)
            lb = load.borders
            pts = lb[:-1, None] + (lb[1:] - lb[:-1])[:, None] * x[None, :]
            out = np.empty(load.card)
            out[:-1] = curve(pts) @ w
            out[-1] = curve(load.reps[-1])
            return out

        pf, gap, order = _refine(rows, name)
        ctx.store(key, name, {"pf": pf})
        entry = {"solver": "closed_form", "cells": load.card,
                 "quadrature_gap": gap, "quadrature_order": order}
    table = np.empty((load.card, 2))
    table[:, i_fail] = pf
    table[:, i_surv] = 1.0 - pf
    node = DiscreteNode(name, states, parents=(ns["load"],), table=table,
                        kind="fragility", meta={"log_median": lam, "log_std": zeta})
    return node, entry


def _build_deterioration(ctx: _Ctx, ns: dict):
    name = ns["name"]
    prev = _interval_parent(ctx, ns["previous"], name)
    scheme = _scheme_for(ctx, ns, name)
    mean_r, std_r = float(ns["ratio_mean"]), float(ns["ratio_std"])
    ratio = dists.Beta.from_moments(mean=mean_r, std=std_r, lower=0.0, upper=1.0)
    key = _key({"kind": "deterioration", "ratio": ratio.to_spec(),
                "reps": _arr(prev.reps), "borders": _arr(scheme.borders)})
    hit = ctx.cached(key)
    if hit is not None:
        owner, payload = hit
        table, entry = payload["table"], {"solver": "closed_form", "cells": prev.card,
                                          "reused_from": owner}
    else:
        # next capacity = previous representative value x a Beta retention ratio
        arg = np.clip(scheme.borders[None, :] / prev.reps[:, None], 0.0, 1.0)
        c = np.asarray(ratio.cdf(arg))
        table, _ = _clean_rows(_masses_from_cdf(c), name)
        ctx.store(key, name, {"table": table})
        entry = {"solver": "closed_form", "cells": prev.card}
    node = DiscreteNode(name, scheme.labels(), parents=(ns["previous"],), table=table,
                        borders=scheme.borders, reps=scheme.midpoints(),
                        kind="deterioration", meta={"scheme": ns["scheme"]})
    return node, entry


def _build_gate(ctx: _Ctx, ns: dict, all_must_survive: bool):
    name = ns["name"]
    states, i_fail, i_surv = _fail_survive(ns, name)
    parents = [_binary_parent(ctx, p, name) for p in ns["parents"]]
    if not parents:
        raise CompileError(f"{name}: gate needs at least one parent")
    surv_idx = [p.states.index("survive") for p in parents]
    shape = tuple(p.card for p in parents)
    table = np.empty(shape + (2,))
    for idx in np.ndindex(*shape):
        flags = [i == s for i, s in zip(idx, surv_idx)]
        alive = all(flags) if all_must_survive else any(flags)
        table[idx + (i_surv,)] = 1.0 if alive else 0.0
        table[idx + (i_fail,)] = 0.0 if alive else 1.0
    kind = "and_gate" if all_must_survive else "or_gate"
    node = DiscreteNode(name, states, parents=tuple(ns["parents"]), table=table,
                        kind=kind, meta={})
    return node, {"solver": "deterministic", "cells": int(np.prod(shape, dtype=int))}


_BUILDERS = {
    "marginal": _build_marginal,
    "factor_sibling": _build_factor_sibling,
    "measurement": _build_measurement,
    "system_failure": _build_system_failure,
    "capacity_cdf": _build_capacity_cdf,
    "conditional_density": _build_conditional_density,
    "exceedance": _build_exceedance,
    "fragility": _build_fragility,
    "deterioration": _build_deterioration,
    "and_gate": lambda ctx, ns: _build_gate(ctx, ns, True),
    "or_gate": lambda ctx, ns: _build_gate(ctx, ns, False),
}


# ---------- compiled model + persistence ----------

def _node_payload(node: DiscreteNode) -> dict:
    return {
        "name": node.name,
        "kind": node.kind,
        "states": list(node.states),
        "parents": list(node.parents),
        "table": _arr(node.table),
        "borders": _arr(node.borders) if node.borders is not None else None,
        "reps": _arr(node.reps) if node.reps is not None else None,
        "meta": dict(node.meta),
    }


def _node_from_payload(p: dict, cards: Mapping[str, int]) -> DiscreteNode:
    shape = tuple(cards[q] for q in p["parents"]) + (len(p["states"]),)
    return DiscreteNode(
        p["name"], p["states"], parents=tuple(p["parents"]),
        table=np.asarray(p["table"], dtype=float).reshape(shape),
        borders=None if p["borders"] is None else np.asarray(p["borders"], dtype=float),
        reps=None if p["reps"] is None else np.asarray(p["reps"], dtype=float),
        kind=p["kind"], meta=dict(p["meta"]))


@dataclass
class CompiledModel:
    """A compiled model: discrete network + build report + canonical document."""

    doc: dict
    bn: DiscreteBN
    _alt_cache: dict = field(default_factory=dict, repr=False)

    @property
    def name(self) -> str:
        return self.doc["name"]

    @property
    def report(self) -> dict:
        return self.doc["report"]

    @property
    def decision(self) -> dict | None:
        return self.doc.get("decision")

    @property
    def timeline(self) -> dict | None:
        return self.doc.get("timeline")

    @property
    def failure(self) -> dict | None:
        return self.doc.get("failure")

    @property
    def topology(self) -> dict | None:
        return self.doc.get("topology")

    @property
    def horizon(self) -> int | None:
        return self.doc.get("horizon")

    def network(self, alternative: str | None = None) -> DiscreteBN:
        """The network, optionally with one decision alternative's overrides applied."""
        if alternative is None:
            return self.bn
        dec = self.decision
        if not dec or alternative not in dec.get("alternatives", []):
            raise KeyError(f"unknown decision alternative {alternative!r}")
        patches = self.doc.get("overrides", {}).get(alternative, [])
        if not patches:
            return self.bn
        if alternative not in self._alt_cache:
            merged = {p["name"]: p for p in self.doc["nodes"]}
            for p in patches:
                merged[p["name"]] = p
            cards = {n: len(p["states"]) for n, p in merged.items()}
            nodes = [_node_from_payload(merged[p["name"]], cards) for p in self.doc["nodes"]]
            self._alt_cache[alternative] = DiscreteBN(nodes)
        return self._alt_cache[alternative]

    @classmethod
    def from_doc(cls, doc: dict) -> "CompiledModel":
        cards = {p["name"]: len(p["states"]) for p in doc["nodes"]}
        nodes = [_node_from_payload(p, cards) for p in doc["nodes"]]
        return cls(doc=doc, bn=DiscreteBN(nodes))


def compile_model(spec: ModelSpec, *, workers: int = 1, seed: int = 0,
                  progress: Callable[[str], None] | None = None) -> CompiledModel:
    """Build every node table and assemble the discrete network."""
    say = progress or (lambda msg: None)
    ctx = _Ctx(spec=spec, workers=max(1, int(workers)), seed=int(seed), progress=say)
    order = []
    for ns in spec.nodes:
        kind = ns["kind"]
        builder = _BUILDERS.get(kind)
        if builder is None:
            raise CompileError(f"node {ns.get('name')!r}: no builder for kind {kind!r}")
        node, entry = builder(ctx, ns)
        entry = {"kind": kind, "parents": list(node.parents), **entry}
        ctx.nodes[node.name] = node
        ctx.entries[node.name] = entry
        order.append(node.name)
        detail = f"reused from {entry['reused_from']}" if "reused_from" in entry else \
            f"{entry.get('solves', 0)} solves" if "solves" in entry else entry["solver"]
        say(f"{node.name}: {kind} ({detail})")

    bn = DiscreteBN(list(ctx.nodes.values()))
    problems = bn.validate()
    if problems:
        raise CompileError("compiled network failed validation: " + "; ".join(problems))

    overrides: dict[str, list[dict]] = {}
    for alt in sorted((spec.decision or {}).get("overrides", {})):
        payloads = []
        for patch in spec.decision["overrides"][alt]:
            pns = {**patch, "name": patch["node"]}
            target = patch["node"]
            if target not in ctx.nodes:
                raise CompileError(f"override for unknown node {target!r}")
            builder = _BUILDERS.get(patch["kind"])
            if builder is None:
                raise CompileError(f"override {target!r}: no builder for kind {patch['kind']!r}")
            node, entry = builder(ctx, pns)
            if node.states != ctx.nodes[target].states:
                raise CompileError(f"override {target!r} changes the state space")
            ctx.entries[f"{target}@{alt}"] = {"kind": patch["kind"],
                                              "parents": list(node.parents), **entry}
            payloads.append(_node_payload(node))
            say(f"{target}@{alt}: override ({entry.get('solves', 0)} solves)")
        overrides[alt] = payloads

    built = sum(1 for e in ctx.entries.values() if "reused_from" not in e)
    totals = {
        "nodes": len(order),
        "tables_built": built,
        "tables_reused": len(ctx.entries) - built,
        "series_solves": sum(e.get("solves", 0) for e in ctx.entries.values()
                             if e.get("solver") == "form_series"),
        "mcs_fallbacks": sum(e.get("non_converged", 0) for e in ctx.entries.values()
                             if "reused_from" not in e),
    }
    report = {"cpts": ctx.entries, "totals": totals, "seed": ctx.seed,
              "workers_hint": ctx.workers}
    raw_blob = json.dumps(spec.raw, sort_keys=True, separators=(",", ":"))
    doc = {
        "format": "rbn-1",
        "name": spec.name,
        "model_sha256": hashlib.sha256(raw_blob.encode()).hexdigest(),
        "seed": ctx.seed,
        "pinning_mode": spec.pinning_mode,
        "horizon": spec.horizon,
        "nodes": [_node_payload(ctx.nodes[n]) for n in order],
        "overrides": overrides,
        "decision": spec.decision,
        "timeline": spec.timeline,
        "failure": spec.failure,
        "topology": spec.topology,
        "report": report,
    }
    return CompiledModel(doc=doc, bn=bn)


def save_rbn(compiled: CompiledModel, path) -> None:
    """Write the canonical document; identical compiles produce identical bytes."""
    blob = json.dumps(compiled.doc, sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(blob + "\n")


def load_rbn(path) -> CompiledModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "rbn-1":
        raise CompileError(f"{path}: not a compiled network file")
    return CompiledModel.from_doc(doc)
