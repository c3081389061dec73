"""Structural reliability kernel.

A ``ReliabilityProblem`` bundles independent continuous variables, optional
common-factor groups (equicorrelated lognormals), pinned values and named
limit states g(x); failure of a mode is g <= 0.  The kernel answers:

* ``form_component`` / ``form_components``: design point, reliability index
  beta and unit alpha vector per mode, by the improved HL-RF iteration with
  an Armijo line search on the classic merit function.
* ``form_series`` / ``series_pf``: first-order series-system failure
  probability 1 - Phi_k(beta; R) with mode correlations R = alpha_i . alpha_j,
  exact for k <= 3 via Owen's T (k = 2) and conditioned quadrature (k = 3);
  simple unimodal bounds ride along.
* ``mcs`` / ``conditional_mcs``: vectorized Monte Carlo, counter-keyed per
  (seed, solve id) so results never depend on scheduling; the conditional
  variant reweights by measurement-noise likelihoods and reports effective
  sample size.

Everything is batched: a grid of pinned parent values solves all cells in one
set of array iterations, and a scalar solve is just a grid of one.  Cells are
independent elementwise, so results are bit-identical no matter how a caller
chunks a grid across workers.

Pinned members of a factor group condition the group by default: the shared
factor gets its exact Gaussian posterior and the remaining members shift
accordingly.  ``pin(..., mode="substitute")`` suppresses that coupling and
treats pins as plain value substitution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import integrate, special
from scipy.stats import qmc

from .dists import (
    CommonFactorGroup,
    Distribution,
    Lognormal,
    Normal,
    std_normal_cdf,
    std_normal_pdf,
    std_normal_quantile,
)
from .expr import Expression

__all__ = [
    "ReliabilityProblem",
    "FormOptions",
    "FormResult",
    "ComponentGrid",
    "SeriesResult",
    "SeriesGrid",
    "McsResult",
    "form_component",
    "form_components",
    "form_series",
    "series_pf",
    "mcs",
    "conditional_mcs",
    "phi2",
    "phi3",
    "mvn_cdf",
    "beta_from_pf",
    "pf_from_beta",
]

BETA_CAP = 8.5  # |beta| beyond this is certainty at double precision for our purposes

# Gauss-Hermite rule rotated to integrate E[f(V)], V ~ N(0,1)
_GH_X, _GH_WRAW = np.polynomial.hermite.hermgauss(32)
_GH_V = np.sqrt(2.0) * _GH_X
_GH_W = _GH_WRAW / np.sqrt(np.pi)


def pf_from_beta(beta):
    return std_normal_cdf(-np.asarray(beta, dtype=float))


def beta_from_pf(pf):
    pf = np.asarray(pf, dtype=float)
    out = np.where(pf <= 0.0, np.inf, np.where(pf >= 1.0, -np.inf, -std_normal_quantile(np.clip(pf, 1e-320, 1.0))))
    return out if out.ndim else float(out)


# ---------- problem ----------

@dataclass(frozen=True)
class ReliabilityProblem:
    """Immutable problem statement.

    ``independents`` are mutually independent variables; members of
    ``factor_groups`` are declared by the group itself and must not repeat in
    ``independents``.  ``fixed`` holds pinned values; pinned group members
    condition the shared factor unless listed in ``substituted``.
    """

    independents: Mapping[str, Distribution]
    limit_states: Mapping[str, Expression]
    factor_groups: tuple[CommonFactorGroup, ...] = ()
    fixed: Mapping[str, float] = field(default_factory=dict)
    substituted: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "independents", dict(self.independents))
        object.__setattr__(self, "limit_states", dict(self.limit_states))
        object.__setattr__(self, "fixed", dict(self.fixed))
        object.__setattr__(self, "factor_groups", tuple(self.factor_groups))
        names = list(self.independents)
        for g in self.factor_groups:
            names.extend(g.names)
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"variable names repeat across declarations: {sorted(dupes)}")
        declared = set(names)
        clash = declared & set(self.fixed)
        clash -= {m for g in self.factor_groups for m in g.names}  # members may be pinned
        clash &= set(self.independents)
        if clash:
            raise ValueError(f"independents cannot also be fixed: {sorted(clash)}")
        known = declared | set(self.fixed)
        for name, ls in self.limit_states.items():
            missing = ls.free_vars - known
            if missing:
                raise ValueError(f"limit state {name!r} uses undeclared variables {sorted(missing)}")
        bad_sub = self.substituted - set(self.fixed)
        if bad_sub:
            raise ValueError(f"substituted names must be fixed: {sorted(bad_sub)}")

    @property
    def free_names(self) -> tuple[str, ...]:
        out = []
        for g in self.factor_groups:
            out.extend(n for n in g.names if n not in self.fixed)
        out.extend(n for n in self.independents if n not in self.fixed)
        return tuple(out)

    def pin(self, values: Mapping[str, float], mode: str = "condition") -> "ReliabilityProblem":
        """Fix variables at values.

        mode="condition" (default): pinned factor-group members update the
        shared factor's posterior, shifting the members that stay free.
        mode="substitute": plain replacement, no factor update.
        """
        if mode not in ("condition", "substitute"):
            raise ValueError(f"unknown pin mode {mode!r}")
        known = set(self.independents) | set(self.fixed) | {m for g in self.factor_groups for m in g.names}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"cannot pin undeclared variables: {sorted(unknown)}")
        indep = {k: v for k, v in self.independents.items() if k not in values}
        subs = set(self.substituted)
        if mode == "substitute":
            subs |= set(values)
        return replace(self, independents=indep,
                       fixed={**self.fixed, **values},
                       substituted=frozenset(subs))


# ---------- standard-space transform ----------

@dataclass
class _MemberChannel:
    name: str
    log_offset: float | np.ndarray  # per-cell when pins vary over a grid
    factor_loading: float
    idio_loading: float
    factor_dim: int
    own_dim: int


@dataclass
class _IndependentChannel:
    name: str
    dist: Distribution
    dim: int
    kind: str  # normal | lognormal | generic


class StandardSpace:
    """Maps standard-normal u to physical bindings, with exact jacobians.

    ``pins`` supplies per-cell values for names in ``problem.fixed`` whose
    value varies across a solve grid; scalar fixed entries broadcast.
    """

    def __init__(self, problem: ReliabilityProblem, pins: Mapping[str, np.ndarray] | None = None):
        self.problem = problem
        self.pins = {k: np.asarray(v, dtype=float) for k, v in (pins or {}).items()}
        overlap = set(self.pins) & set(problem.fixed)
        if overlap != set(self.pins):
            raise ValueError(f"grid pins must name fixed variables; stray: {sorted(set(self.pins) - set(problem.fixed))}")
        sizes = {v.shape for v in self.pins.values()}
        if len(sizes) > 1:
            raise ValueError(f"grid pin arrays disagree in shape: {sizes}")
        self.ncells = next(iter(sizes))[0] if sizes else 1

        self.members: list[_MemberChannel] = []
        self.indeps: list[_IndependentChannel] = []
        dim = 0
        for group in problem.factor_groups:
            free = [n for n in group.names if n not in problem.fixed]
            if not free:
                continue
            factor_dim = dim
            dim += 1
            observed = {n: self._fixed_value(n) for n in group.names
                        if n in problem.fixed and n not in problem.substituted}
            post = _factor_posterior_vectorized(group, observed)
            for name in free:
                form = group.member_form(name)
                self.members.append(_MemberChannel(
                    name=name,
                    log_offset=form.log_offset + form.factor_loading * post[0],
                    factor_loading=form.factor_loading * post[1],
                    idio_loading=form.idio_loading,
                    factor_dim=factor_dim,
                    own_dim=dim,
                ))
                dim += 1
        for name, dist in problem.independents.items():
            if name in problem.fixed:
                continue
            kind = "generic"
            if isinstance(dist, Normal):
                kind = "normal"
            elif isinstance(dist, Lognormal):
                kind = "lognormal"
            self.indeps.append(_IndependentChannel(name, dist, dim, kind))
            dim += 1
        self.ndim = dim
        self.var_names = tuple(c.name for c in self.members) + tuple(c.name for c in self.indeps)

    def _fixed_value(self, name):
        if name in self.pins:
            return self.pins[name]
        return self.problem.fixed[name]

    def fixed_bindings(self) -> dict:
        out = dict(self.problem.fixed)
        out.update(self.pins)
        return out

    def to_physical(self, u: np.ndarray) -> dict:
        """u of shape (m, ndim) -> {name: (m,) array}, free variables only."""
        out = {}
        for c in self.members:
            out[c.name] = np.exp(c.log_offset
                                 + c.factor_loading * u[:, c.factor_dim]
                                 + c.idio_loading * u[:, c.own_dim])
        for c in self.indeps:
            col = u[:, c.dim]
            if c.kind == "normal":
                out[c.name] = c.dist.mu + c.dist.sigma * col
            elif c.kind == "lognormal":
                out[c.name] = np.exp(c.dist.log_mean + c.dist.log_std * col)
            else:
                p = np.clip(std_normal_cdf(col), 1e-16, 1.0 - 1e-16)
                out[c.name] = np.asarray(c.dist.quantile(p))
        return out

    def gradient_to_u(self, u: np.ndarray, phys: dict, grad_x: dict) -> np.ndarray:
        """Chain dg/dx into dg/du; shapes (m, ndim)."""
        m = u.shape[0]
        out = np.zeros((m, self.ndim))
        for c in self.members:
            g = grad_x.get(c.name)
            if g is None:
                continue
            gx = np.broadcast_to(np.asarray(g, dtype=float), (m,)) * phys[c.name]
            out[:, c.factor_dim] += gx * c.factor_loading
            out[:, c.own_dim] += gx * c.idio_loading
        for c in self.indeps:
            g = grad_x.get(c.name)
            if g is None:
                continue
            g = np.broadcast_to(np.asarray(g, dtype=float), (m,))
            if c.kind == "normal":
                out[:, c.dim] += g * c.dist.sigma
            elif c.kind == "lognormal":
                out[:, c.dim] += g * c.dist.log_std * phys[c.name]
            else:
                dens = np.maximum(np.asarray(c.dist.pdf(phys[c.name])), 1e-300)
                out[:, c.dim] += g * std_normal_pdf(u[:, c.dim]) / dens
        return out


def _factor_posterior_vectorized(group: CommonFactorGroup, observed: Mapping):
    """(mean, std) of the factor posterior; mean may be an array over cells."""
    k = len(observed)
    if k == 0:
        return 0.0, 1.0
    rho = group.correlation
    z_sum = 0.0
    for name, value in observed.items():
        d = group.members[name]
        v = np.asarray(value, dtype=float)
        if np.any(v <= 0):
            raise ValueError(f"pinned lognormal member {name} must be positive")
        z_sum = z_sum + (np.log(v) - d.log_mean) / d.log_std
    denom = 1.0 - rho + k * rho
    mean = math.sqrt(rho) * z_sum / denom
    if np.ndim(mean) == 0:
        mean = float(mean)
    return mean, math.sqrt((1.0 - rho) / denom)


# ---------- FORM ----------

@dataclass(frozen=True)
class FormOptions:
    tol_g: float = 1e-6        # on |g| relative to the characteristic scale
    tol_direction: float = 1e-6
    max_iter: int = 100
    armijo_halvings: int = 8
    scale_points: int = 32     # quasi-random points for the characteristic g scale
    curvature: bool = False    # second-order (Breitung) correction of mode betas
    curvature_step: float = 1e-3


@dataclass
class ComponentGrid:
    """Per-cell FORM outcome for one limit state over a solve grid."""

    mode: str
    beta: np.ndarray           # (m,)
    alpha: np.ndarray          # (m, d) unit row vectors
    u_star: np.ndarray         # (m, d)
    converged: np.ndarray      # (m,) bool
    trivial: np.ndarray        # (m,) bool: vanished gradient, certain outcome
    n_iter: np.ndarray         # (m,)
    g_residual: np.ndarray     # (m,)

    @property
    def pf(self):
        return pf_from_beta(self.beta)


@dataclass
class FormResult:
    """Scalar convenience view of a one-cell grid."""

    mode: str
    beta: float
    alpha: np.ndarray
    u_star: np.ndarray
    x_star: dict
    converged: bool
    trivial: bool
    n_iter: int
    g_residual: float

    @property
    def pf(self):
        return float(pf_from_beta(self.beta))


def _g_scale(space: StandardSpace, ls: Expression, fixed: dict, npts: int) -> np.ndarray:
    """Characteristic |g| per cell from unscrambled Sobol points in u-space."""
    d = max(space.ndim, 1)
    sob = qmc.Sobol(d, scramble=False).random(npts)
    upts = std_normal_quantile(np.clip(sob, 1.0 / 64, 63.0 / 64))
    m = space.ncells
    acc = np.zeros(m)
    for row in upts:
        u = np.broadcast_to(row, (m, d)) if space.ndim else np.zeros((m, 0))
        phys = space.to_physical(u)
        g = np.broadcast_to(np.asarray(ls({**fixed, **phys}), dtype=float), (m,))
        acc += np.abs(g)
    scale = acc / npts
    return np.where(scale > 0, scale, 1.0)


def form_components(problem: ReliabilityProblem, mode: str,
                    pins: Mapping[str, np.ndarray] | None = None,
                    options: FormOptions | None = None) -> ComponentGrid:
    """Batched improved HL-RF with an Armijo line search on the merit
    m(u) = 0.5 |u|^2 + c |g(u)|.

    Cells iterate independently under masks; chunking a grid never changes
    any cell's trajectory.
    """
    opt = options or FormOptions()
    if mode not in problem.limit_states:
        raise KeyError(f"unknown limit state {mode!r}")
    ls = problem.limit_states[mode]
    space = StandardSpace(problem, pins)
    m, d = space.ncells, space.ndim
    fixed = space.fixed_bindings()
    wrt = set(space.var_names) & ls.free_vars

    scale = _g_scale(space, ls, fixed, opt.scale_points)
    u = np.zeros((m, max(d, 1)))
    beta = np.zeros(m)
    alpha = np.zeros((m, max(d, 1)))
    converged = np.zeros(m, dtype=bool)
    trivial = np.zeros(m, dtype=bool)
    n_iter = np.zeros(m, dtype=int)
    g_res = np.full(m, np.nan)

    def evaluate(u_all):
        phys = space.to_physical(u_all)
        g, grad_x = ls.gradient({**fixed, **phys}, wrt=wrt)
        g = np.broadcast_to(np.asarray(g, dtype=float), (m,)).copy()
        grad_u = space.gradient_to_u(u_all, phys, grad_x)
        return g, grad_u

    def g_only(u_all):
        phys = space.to_physical(u_all)
        return np.broadcast_to(np.asarray(ls({**fixed, **phys}), dtype=float), (m,)).copy()

    if d == 0:
        # nothing random: g is a constant per cell
        g0 = g_only(u)
        return ComponentGrid(mode, np.where(g0 > 0, np.inf, -np.inf), alpha, u,
                             np.ones(m, bool), np.ones(m, bool), n_iter, g0)

    active = np.ones(m, dtype=bool)
    # masked lanes legitimately hold inf/nan mid-flight (huge g at extreme
    # pins); only the per-lane exit tests decide what counts
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        u = _form_iterate(opt, active, u, beta, alpha, converged, trivial,
                          n_iter, g_res, scale, evaluate, g_only)
    return ComponentGrid(mode, beta, alpha, u, converged, trivial, n_iter, g_res)


def _form_iterate(opt, active, u, beta, alpha, converged, trivial, n_iter,
                  g_res, scale, evaluate, g_only) -> np.ndarray:
    for _ in range(opt.max_iter):
        if not active.any():
            break
        g, grad_u = evaluate(u)
        g_res[active] = g[active]
        norm = np.linalg.norm(grad_u, axis=1)
        degenerate = active & (norm <= 1e-12 * (scale + 1e-300))
        if degenerate.any():
            # flat g: certain outcome decided by its sign
            beta[degenerate] = np.where(g[degenerate] > 0, np.inf, -np.inf)
            trivial[degenerate] |= True
            converged[degenerate] = True
            active &= ~degenerate
            if not active.any():
                break
        norm_safe = np.maximum(norm, 1e-300)
        a = -grad_u / norm_safe[:, None]
        au = np.einsum("ij,ij->i", a, u)
        ortho = np.linalg.norm(u - au[:, None] * a, axis=1)
        unorm = np.linalg.norm(u, axis=1)
        done = active & (np.abs(g) < opt.tol_g * scale) & (ortho < opt.tol_direction * (1.0 + unorm))
        if done.any():
            alpha[done] = a[done]
            beta[done] = au[done]
            converged[done] = True
            active &= ~done
            if not active.any():
                break
        # HL-RF target and Armijo backtracking for the still-active cells
        u_target = (au + g / norm_safe)[:, None] * a
        step = u_target - u
        c_merit = 2.0 * unorm / norm_safe + 10.0
        merit0 = 0.5 * unorm**2 + c_merit * np.abs(g)
        lam = np.where(active, 1.0, 0.0)
        accepted = ~active
        u_new = u.copy()
        for _half in range(opt.armijo_halvings):
            trial = u + lam[:, None] * step
            g_trial = g_only(trial)
            mer = 0.5 * np.einsum("ij,ij->i", trial, trial) + c_merit * np.abs(g_trial)
            take = active & ~accepted & (mer < merit0)
            u_new[take] = trial[take]
            accepted |= take
            if accepted.all():
                break
            lam = np.where(accepted, lam, lam * 0.5)
        leftover = active & ~accepted
        if leftover.any():
            # accept the smallest step anyway; HL-RF often recovers
            u_new[leftover] = (u + lam[:, None] * step)[leftover]
        u = u_new
        n_iter += active.astype(int)

    if active.any():
        # ran out of iterations: record the current linearization, unconverged
        g, grad_u = evaluate(u)
        norm = np.maximum(np.linalg.norm(grad_u, axis=1), 1e-300)
        a = -grad_u / norm[:, None]
        beta[active] = np.einsum("ij,ij->i", a, u)[active]
        alpha[active] = a[active]
        g_res[active] = g[active]
    return u


def _curvature_adjust(problem: ReliabilityProblem, comp: ComponentGrid,
                      pins: Mapping[str, np.ndarray] | None,
                      options: FormOptions) -> np.ndarray:
    """Generalized per-cell betas from a second-order surface expansion.

    The limit-state Hessian at each design point (central differences of the
    exact u-space gradient) is projected onto the tangent plane; its
    eigenvalues are the principal curvatures of the failure surface.  Each
    curved direction contributes the exact one-dimensional correction
    E_v[Phi(-beta - 0.5 kappa v^2)] / Phi(-beta) (Gauss-Hermite), and the
    corrections compose multiplicatively -- exact for a single curved
    direction, second-order accurate in general, and continuous across
    beta = 0.  Cells that are trivial, unconverged, or beyond the beta cap
    keep their first-order value.
    """
    ls = problem.limit_states[comp.mode]
    space = StandardSpace(problem, pins)
    m, d = space.ncells, space.ndim
    out = comp.beta.copy()
    if d < 2:
        return out                       # no tangent directions to curve
    fixed = space.fixed_bindings()
    wrt = set(space.var_names) & ls.free_vars

    def grad(u_all):
        phys = space.to_physical(u_all)
        _, grad_x = ls.gradient({**fixed, **phys}, wrt=wrt)
        return space.gradient_to_u(u_all, phys, grad_x)

    sel = comp.converged & ~comp.trivial & (np.abs(comp.beta) < BETA_CAP)
    if not sel.any():
        return out
    u0 = comp.u_star
    grad0 = grad(u0)
    norm0 = np.linalg.norm(grad0, axis=1)
    sel &= norm0 > 1e-300
    h = options.curvature_step * (1.0 + np.abs(u0))
    H = np.empty((m, d, d))
    for j in range(d):
        shift = np.zeros((m, d))
        shift[:, j] = h[:, j]
        H[:, :, j] = (grad(u0 + shift) - grad(u0 - shift)) / (2.0 * h[:, j][:, None])
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    alpha = comp.alpha
    proj = np.eye(d)[None, :, :] - alpha[:, :, None] * alpha[:, None, :]
    curv = np.einsum("mij,mjk,mkl->mil", proj, H, proj)
    curv /= np.maximum(norm0, 1e-300)[:, None, None]
    lam = np.linalg.eigvalsh(curv)                        # (m, d)
    # the projected-out alpha direction contributes one spurious ~0 eigenvalue
    spurious = np.argmin(np.abs(lam), axis=1)
    keep = np.ones_like(lam, dtype=bool)
    keep[np.arange(m), spurious] = False
    kappa = lam[keep].reshape(m, d - 1)
    beta = np.where(sel, comp.beta, 0.0)      # placeholder rows are discarded
    # one expansion covers both signs: correct the small-side orthant
    # (failure for beta >= 0, survival below) seen from the origin
    sgn = np.where(beta >= 0.0, 1.0, -1.0)
    bpos = sgn * beta
    keff = sgn[:, None] * kappa
    args = -bpos[:, None, None] - 0.5 * keff[:, :, None] * (_GH_V * _GH_V)
    terms = np.einsum("q,mdq->md", _GH_W, std_normal_cdf(args))
    base = np.maximum(std_normal_cdf(-bpos), 1e-300)
    factor = np.clip(np.prod(terms / base[:, None], axis=1), 0.125, 8.0)
    small = np.clip(base * factor, 1e-300, 1.0 - 1e-16)
    pf = np.where(sgn > 0.0, small, 1.0 - small)
    out[sel] = beta_from_pf(pf)[sel]
    return out


def _pair_joint_grid(problem: ReliabilityProblem, comp_i: ComponentGrid,
                     comp_j: ComponentGrid, beta_gi: np.ndarray, beta_gj: np.ndarray,
                     pins: Mapping[str, np.ndarray] | None,
                     options: FormOptions) -> np.ndarray:
    """P(both modes fail) per cell, linearized at the pair's own most-likely
    point.

    Single-mode tangents underestimate the overlap of curved surfaces, so the
    corner of the two tangent planes seeds a two-constraint normal-flow
    iteration (the HL-RF update with a 2x2 Gram solve) onto the true
    intersection; betas and the correlation re-read from the converged point
    feed the bivariate normal corner.  Cells where the corner construction is
    invalid (a slack tangent, near-parallel modes, no convergence) fall back
    to generalized margins with the single-point correlation, and every cell
    is clipped into the Frechet bounds of its margins.
    """
    ls_i = problem.limit_states[comp_i.mode]
    ls_j = problem.limit_states[comp_j.mode]
    space = StandardSpace(problem, pins)
    m = space.ncells
    fixed = space.fixed_bindings()
    wrt_i = set(space.var_names) & ls_i.free_vars
    wrt_j = set(space.var_names) & ls_j.free_vars

    def eval2(u_all):
        phys = space.to_physical(u_all)
        gi, gxi = ls_i.gradient({**fixed, **phys}, wrt=wrt_i)
        gj, gxj = ls_j.gradient({**fixed, **phys}, wrt=wrt_j)
        gi = np.broadcast_to(np.asarray(gi, dtype=float), (m,)).copy()
        gj = np.broadcast_to(np.asarray(gj, dtype=float), (m,)).copy()
        return (gi, gj, space.gradient_to_u(u_all, phys, gxi),
                space.gradient_to_u(u_all, phys, gxj))

    scale_i = _g_scale(space, ls_i, fixed, options.scale_points)
    scale_j = _g_scale(space, ls_j, fixed, options.scale_points)
    # trivial rows carry infinite betas; give them finite placeholders so the
    # corner-seed arithmetic stays quiet (the rows are excluded below anyway)
    bi = np.where(np.isfinite(comp_i.beta), comp_i.beta, 0.0)
    bj = np.where(np.isfinite(comp_j.beta), comp_j.beta, 0.0)
    rho0 = np.clip(np.einsum("md,md->m", comp_i.alpha, comp_j.alpha), -1.0, 1.0)
    usable = (comp_i.converged & comp_j.converged & ~comp_i.trivial & ~comp_j.trivial
              & (np.abs(bi) < BETA_CAP) & (np.abs(bj) < BETA_CAP)
              & (np.abs(rho0) < 0.999))
    det = np.where(usable, 1.0 - rho0 * rho0, 1.0)
    mult_i = np.where(usable, (bi - rho0 * bj) / det, 0.0)
    mult_j = np.where(usable, (bj - rho0 * bi) / det, 0.0)
    u = mult_i[:, None] * comp_i.alpha + mult_j[:, None] * comp_j.alpha
    conv = np.zeros(m, dtype=bool)
    for _ in range(options.max_iter):
        gi, gj, grad_i, grad_j = eval2(u)
        a11 = np.einsum("md,md->m", grad_i, grad_i)
        a12 = np.einsum("md,md->m", grad_i, grad_j)
        a22 = np.einsum("md,md->m", grad_j, grad_j)
        det2 = a11 * a22 - a12 * a12
        good = det2 > 1e-10 * np.maximum(a11 * a22, 1e-300)
        ri = np.einsum("md,md->m", grad_i, u) - gi
        rj = np.einsum("md,md->m", grad_j, u) - gj
        den = np.where(good, det2, 1.0)
        wi = (a22 * ri - a12 * rj) / den
        wj = (a11 * rj - a12 * ri) / den
        u_new = wi[:, None] * grad_i + wj[:, None] * grad_j
        hit = (np.abs(gi) < options.tol_g * scale_i) & (np.abs(gj) < options.tol_g * scale_j)
        near = (np.linalg.norm(u_new - u, axis=1)
                < options.tol_direction * (1.0 + np.linalg.norm(u, axis=1)))
        conv |= usable & good & hit & near
        u = np.where((conv | ~usable | ~good)[:, None], u, u_new)
        if (conv | ~usable).all():
            break
    gi, gj, grad_i, grad_j = eval2(u)
    ni = np.maximum(np.linalg.norm(grad_i, axis=1), 1e-300)
    nj = np.maximum(np.linalg.norm(grad_j, axis=1), 1e-300)
    ahat_i, ahat_j = -grad_i / ni[:, None], -grad_j / nj[:, None]
    bhat_i = np.einsum("md,md->m", ahat_i, u)
    bhat_j = np.einsum("md,md->m", ahat_j, u)
    rho_hat = np.clip(np.einsum("md,md->m", ahat_i, ahat_j), -0.999, 0.999)
    margin_i = pf_from_beta(np.clip(beta_gi, -40.0, 40.0))
    margin_j = pf_from_beta(np.clip(beta_gj, -40.0, 40.0))
    # which tangents are active at the corner decides how the refined corner
    # reads out; each branch is the exact bivariate identity for its quadrant,
    # with generalized margins covering the slack side
    corner = phi2(-bhat_i, -bhat_j, rho_hat)
    no_j = margin_i - phi2(-bhat_i, bhat_j, -rho_hat)
    no_i = margin_j - phi2(bhat_i, -bhat_j, -rho_hat)
    both = margin_i + margin_j - 1.0 + phi2(bhat_i, bhat_j, rho_hat)
    refined = np.where(mult_i > 0.0,
                       np.where(mult_j > 0.0, corner, no_j),
                       np.where(mult_j > 0.0, no_i, both))
    fallback = phi2(-np.clip(beta_gi, -40.0, 40.0), -np.clip(beta_gj, -40.0, 40.0),
                    np.clip(rho0, -0.999, 0.999))
    out = np.where(usable & conv, refined, fallback)
    return np.clip(out, np.maximum(margin_i + margin_j - 1.0, 0.0),
                   np.minimum(margin_i, margin_j))


def form_component(problem: ReliabilityProblem, mode: str,
                   options: FormOptions | None = None) -> FormResult:
    grid = form_components(problem, mode, pins=None, options=options)
    if options is not None and options.curvature:
        grid.beta = _curvature_adjust(problem, grid, None, options)
    space = StandardSpace(problem)
    phys = space.to_physical(grid.u_star) if space.ndim else {}
    return FormResult(
        mode=mode,
        beta=float(grid.beta[0]),
        alpha=grid.alpha[0].copy(),
        u_star=grid.u_star[0].copy(),
        x_star={k: float(v[0]) for k, v in phys.items()},
        converged=bool(grid.converged[0]),
        trivial=bool(grid.trivial[0]),
        n_iter=int(grid.n_iter[0]),
        g_residual=float(grid.g_residual[0]),
    )


# ---------- small-dimension multinormal CDF ----------

def _phi2_core(h, k, rho):
    h = np.where(h == 0.0, 1e-15, h)
    k = np.where(k == 0.0, 1e-15, k)
    s = np.sqrt(np.clip(1.0 - rho * rho, 1e-30, 1.0))
    ah = (k - rho * h) / (h * s)
    ak = (h - rho * k) / (k * s)
    both = special.owens_t(h, ah) + special.owens_t(k, ak)
    corr = np.where(h * k > 0, 0.0, 0.5)
    return 0.5 * (std_normal_cdf(h) + std_normal_cdf(k)) - both - corr


def phi2(h, k, rho):
    """Bivariate standard-normal CDF P(X <= h, Y <= k) via Owen's T."""
    scalar = np.ndim(h) == 0 and np.ndim(k) == 0 and np.ndim(rho) == 0
    h, k, rho = np.broadcast_arrays(np.asarray(h, dtype=float),
                                    np.asarray(k, dtype=float),
                                    np.asarray(rho, dtype=float))
    h, k, rho = np.atleast_1d(h), np.atleast_1d(k), np.atleast_1d(rho)
    h, k = np.clip(h, -37.0, 37.0), np.clip(k, -37.0, 37.0)
    out = np.empty_like(h)
    hi = rho >= 1.0 - 1e-14
    lo = rho <= -1.0 + 1e-14
    mid = ~(hi | lo)
    if hi.any():
        out[hi] = std_normal_cdf(np.minimum(h[hi], k[hi]))
    if lo.any():
        out[lo] = np.maximum(std_normal_cdf(h[lo]) + std_normal_cdf(k[lo]) - 1.0, 0.0)
    if mid.any():
        out[mid] = _phi2_core(h[mid], k[mid], rho[mid])
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


_GL64 = np.polynomial.legendre.leggauss(64)
_GL128 = np.polynomial.legendre.leggauss(128)


def _phi3_quad(b, R, nodes):
    """Batch trivariate CDF by conditioning on the third coordinate.

    b: (m, 3); R: (m, 3, 3).  Integrates phi(z) * Phi2(...) for z in
    (-inf, b3] with Gauss-Legendre on the effectively supported interval.
    """
    t, w = nodes
    r13, r23, r12 = R[:, 0, 2], R[:, 1, 2], R[:, 0, 1]
    s13 = np.sqrt(np.clip(1.0 - r13**2, 1e-30, 1.0))
    s23 = np.sqrt(np.clip(1.0 - r23**2, 1e-30, 1.0))
    rc = np.clip((r12 - r13 * r23) / (s13 * s23), -1.0, 1.0)
    lo = -BETA_CAP - 0.5
    hi = np.clip(b[:, 2], lo, BETA_CAP + 0.5)
    mid, half = (hi + lo) / 2.0, (hi - lo) / 2.0
    z = mid[:, None] + half[:, None] * t[None, :]           # (m, q)
    a1 = np.clip((b[:, 0, None] - r13[:, None] * z) / s13[:, None], -37.0, 37.0)
    a2 = np.clip((b[:, 1, None] - r23[:, None] * z) / s23[:, None], -37.0, 37.0)
    inner = phi2(a1, a2, np.broadcast_to(rc[:, None], a1.shape))
    dens = std_normal_pdf(z)
    return half * np.einsum("q,mq->m", w, dens * inner)


def _phi3_scalar_adaptive(b, R):
    r13, r23, r12 = R[0, 2], R[1, 2], R[0, 1]
    if abs(r13) >= 1.0 - 1e-12:
        b1 = min(b[0], b[2]) if r13 > 0 else b[0]
        if r13 > 0:
            return phi2(b1, b[1], r12)
        return max(phi2(b[0], b[1], r12) - phi2(-b[2], b[1], r12), 0.0)
    if abs(r23) >= 1.0 - 1e-12:
        if r23 > 0:
            return phi2(b[0], min(b[1], b[2]), r12)
        return max(phi2(b[0], b[1], r12) - phi2(b[0], -b[2], r12), 0.0)
    s13, s23 = math.sqrt(1 - r13**2), math.sqrt(1 - r23**2)
    rc = min(max((r12 - r13 * r23) / (s13 * s23), -1.0), 1.0)

    def integrand(z):
        a1 = min(max((b[0] - r13 * z) / s13, -37.0), 37.0)
        a2 = min(max((b[1] - r23 * z) / s23, -37.0), 37.0)
        return float(std_normal_pdf(z)) * phi2(a1, a2, rc)

    hi = min(b[2], BETA_CAP + 0.5)
    val, _ = integrate.quad(integrand, -BETA_CAP - 0.5, hi, epsabs=1e-12, epsrel=1e-10, limit=200)
    return min(max(val, 0.0), 1.0)


def phi3(b, R):
    """Trivariate standard-normal CDF; b length-3, R a 3x3 correlation matrix."""
    b = np.asarray(b, dtype=float)
    R = np.asarray(R, dtype=float)
    if b.shape == (3,):
        return float(phi3_batch(b[None, :], R[None, :, :])[0])
    raise ValueError("phi3 takes one length-3 bound vector; use phi3_batch for grids")


def phi3_batch(b, R):
    b = np.asarray(b, dtype=float)
    R = np.asarray(R, dtype=float)
    m = b.shape[0]
    out = np.empty(m)
    near = (np.abs(R[:, 0, 2]) >= 1.0 - 1e-9) | (np.abs(R[:, 1, 2]) >= 1.0 - 1e-9)
    ok_idx = np.flatnonzero(~near)
    if ok_idx.size:
        v64 = _phi3_quad(b[ok_idx], R[ok_idx], _GL64)
        v128 = _phi3_quad(b[ok_idx], R[ok_idx], _GL128)
        vals = np.clip(v128, 0.0, 1.0)
        for pos in np.flatnonzero(np.abs(v128 - v64) > 5e-10):
            vals[pos] = _phi3_scalar_adaptive(b[ok_idx[pos]], R[ok_idx[pos]])
        out[ok_idx] = vals
    for i in np.flatnonzero(near):
        out[i] = _phi3_scalar_adaptive(b[i], R[i])
    return out


def mvn_cdf(b, R):
    """Standard-normal orthant CDF for k <= 3 (exact methods only)."""
    b = np.asarray(b, dtype=float)
    k = b.shape[-1]
    if k == 1:
        return float(std_normal_cdf(b[0]))
    if k == 2:
        return float(phi2(b[0], b[1], np.asarray(R)[0, 1]))
    if k == 3:
        return phi3(b, R)
    raise ValueError(f"mvn_cdf covers k <= 3, got k={k}; use Monte Carlo for larger systems")


# ---------- series system ----------

@dataclass
class SeriesGrid:
    """First-order series-system failure probability over a solve grid."""

    pf: np.ndarray
    beta: np.ndarray
    components: list
    bound_low: np.ndarray
    bound_high: np.ndarray
    all_converged: np.ndarray       # (m,) bool

    def cell(self, i: int) -> "SeriesResult":
        return SeriesResult(
            pf=float(self.pf[i]),
            beta=float(self.beta[i]),
            mode_betas={c.mode: float(c.beta[i]) for c in self.components},
            bound_low=float(self.bound_low[i]),
            bound_high=float(self.bound_high[i]),
            converged=bool(self.all_converged[i]),
        )


@dataclass
class SeriesResult:
    pf: float
    beta: float
    mode_betas: dict
    bound_low: float
    bound_high: float
    converged: bool


def form_series(problem: ReliabilityProblem, modes: Sequence[str] | None = None,
                pins: Mapping[str, np.ndarray] | None = None,
                options: FormOptions | None = None) -> SeriesGrid:
    """Series-system pf = 1 - Phi_k(beta; R) from per-mode FORM solves.

    Modes that are certainly safe in a cell (beta >= cap) drop out of the
    union there; a certainly failing mode makes the cell's pf exactly 1.
    Correlations R_ij = alpha_i . alpha_j use the common u-space.
    """
    mode_names = list(modes) if modes is not None else list(problem.limit_states)
    comps = [form_components(problem, name, pins=pins, options=options) for name in mode_names]
    m = comps[0].beta.shape[0]
    k = len(comps)
    curved = options is not None and options.curvature
    pair_joints = {}
    if curved:
        # generalized margins first, then pair overlaps located at the pairs'
        # own design points (both need the first-order geometry intact)
        beta_g = np.stack([_curvature_adjust(problem, c, pins, options) for c in comps],
                          axis=1)
        for a in range(k):
            for b in range(a + 1, k):
                pair_joints[a, b] = _pair_joint_grid(
                    problem, comps[a], comps[b], beta_g[:, a], beta_g[:, b], pins, options)
        for j, c in enumerate(comps):
            c.beta = beta_g[:, j]
    betas = np.stack([c.beta for c in comps], axis=1)          # (m, k)
    pfs = pf_from_beta(np.clip(betas, -40.0, 40.0))
    bound_low = pfs.max(axis=1)
    bound_high = np.minimum(pfs.sum(axis=1), 1.0)

    certain_fail = (betas <= -BETA_CAP).any(axis=1)
    live = betas < BETA_CAP                                     # (m, k) modes in play
    pf = np.zeros(m)
    pf[certain_fail] = 1.0

    todo = ~certain_fail
    patterns = {}
    for i in np.flatnonzero(todo):
        patterns.setdefault(tuple(live[i]), []).append(i)
    for pattern, idx_list in patterns.items():
        idx = np.asarray(idx_list)
        active = [j for j, keep in enumerate(pattern) if keep]
        if not active:
            pf[idx] = 0.0
            continue
        if len(active) == 1:
            pf[idx] = pf_from_beta(betas[idx, active[0]])
            continue
        if len(active) > 3:
            raise ValueError(
                f"first-order series evaluation covers up to 3 concurrent modes, got {len(active)}; "
                "use mcs() for larger unions")
        alpha = np.stack([comps[j].alpha[idx] for j in active], axis=1)   # (n, k, d)
        R = np.clip(np.einsum("nkd,nld->nkl", alpha, alpha), -1.0, 1.0)
        bsel = betas[idx][:, active]
        if curved:
            # inclusion-exclusion: corrected margins minus pair overlaps,
            # plus the (small) multinormal triple term
            msel = pfs[idx][:, active]
            val = msel.sum(axis=1)
            for ii in range(len(active)):
                for jj in range(ii + 1, len(active)):
                    val = val - pair_joints[active[ii], active[jj]][idx]
            if len(active) == 3:
                val = val + phi3_batch(-bsel, R)
            pf[idx] = np.clip(val, msel.max(axis=1), np.minimum(msel.sum(axis=1), 1.0))
        elif len(active) == 2:
            pf[idx] = 1.0 - phi2(bsel[:, 0], bsel[:, 1], R[:, 0, 1])
        else:
            pf[idx] = 1.0 - phi3_batch(bsel, R)
    pf = np.clip(pf, 0.0, 1.0)
    all_conv = np.logical_and.reduce([c.converged | c.trivial for c in comps])
    return SeriesGrid(pf=pf, beta=beta_from_pf(pf), components=comps,
                      bound_low=bound_low, bound_high=bound_high, all_converged=all_conv)


def series_pf(problem: ReliabilityProblem, modes: Sequence[str] | None = None,
              options: FormOptions | None = None) -> SeriesResult:
    return form_series(problem, modes, pins=None, options=options).cell(0)


# ---------- Monte Carlo ----------

@dataclass
class McsResult:
    pf: float
    half_width: float      # 95% half width
    n: int
    ess: float
    warnings: tuple = ()

    @property
    def beta(self):
        return float(beta_from_pf(self.pf))

    @property
    def band(self):
        return (max(self.pf - self.half_width, 0.0), min(self.pf + self.half_width, 1.0))


def _solve_rng(seed: int, solve_id: int) -> np.random.Generator:
    """Counter-keyed generator: results depend only on (seed, solve_id)."""
    key = [int(seed) % (1 << 64), int(solve_id) % (1 << 64)]
    return np.random.Generator(np.random.Philox(key=key))


def _sample_free(problem: ReliabilityProblem, rng, n: int) -> dict:
    out = {}
    for group in problem.factor_groups:
        free = [m for m in group.names if m not in problem.fixed]
        if not free:
            continue
        observed = {m: problem.fixed[m] for m in group.names
                    if m in problem.fixed and m not in problem.substituted}
        post = group.factor_posterior(observed)
        u_shared = post.mean + post.std * rng.standard_normal(n)
        for name in free:
            form = group.member_form(name)
            u_own = rng.standard_normal(n)
            out[name] = np.exp(form.log_offset + form.factor_loading * u_shared
                               + form.idio_loading * u_own)
    for name, dist in problem.independents.items():
        if name in problem.fixed:
            continue
        out[name] = dist.sample(rng, n)
    return out


def _system_failed(problem, modes, bindings, n) -> np.ndarray:
    worst = None
    for name in modes:
        g = np.asarray(problem.limit_states[name](bindings), dtype=float)
        worst = g if worst is None else np.minimum(worst, g)
    # constant limit states evaluate to scalars; spread them over the batch
    return np.broadcast_to(worst <= 0.0, (n,))


def mcs(problem: ReliabilityProblem, modes: Sequence[str] | None = None, *,
        n: int = 1_000_000, seed: int = 0, solve_id: int = 0,
        batch: int = 1 << 19) -> McsResult:
    """Crude Monte Carlo on the (series) system; deterministic per (seed, solve_id)."""
    mode_names = list(modes) if modes is not None else list(problem.limit_states)
    rng = _solve_rng(seed, solve_id)
    fixed = dict(problem.fixed)
    hits = 0
    done = 0
    while done < n:
        take = min(batch, n - done)
        draws = _sample_free(problem, rng, take)
        hits += int(_system_failed(problem, mode_names, {**fixed, **draws}, take).sum())
        done += take
    p = hits / n
    hw = 1.96 * math.sqrt(max(p * (1.0 - p), 0.0) / n)
    return McsResult(pf=p, half_width=hw, n=n, ess=float(n))


def conditional_mcs(problem: ReliabilityProblem, modes: Sequence[str] | None, *,
                    measurements: Sequence[tuple[str, float, Distribution]],
                    n: int = 1_000_000, seed: int = 0, solve_id: int = 0,
                    batch: int = 1 << 19) -> McsResult:
    """Measurement-conditioned Monte Carlo by likelihood weighting.

    Each measurement (name, observed, noise) contributes a weight factor
    noise.pdf(observed - x_name).  The estimate is the weighted failure
    fraction; the 95% half width comes from the delta method for the ratio,
    and an effective sample size below 100 raises a warning.
    """
    mode_names = list(modes) if modes is not None else list(problem.limit_states)
    rng = _solve_rng(seed, solve_id)
    fixed = dict(problem.fixed)
    sw = swf = sww = swwf = swa = 0.0
    done = 0
    while done < n:
        take = min(batch, n - done)
        draws = _sample_free(problem, rng, take)
        w = np.ones(take)
        for name, observed, noise in measurements:
            if name not in draws:
                raise KeyError(f"measurement of {name!r}, which is not a free variable")
            w *= np.asarray(noise.pdf(observed - draws[name]), dtype=float)
        f = _system_failed(problem, mode_names, {**fixed, **draws}, take).astype(float)
        sw += float(w.sum())
        swf += float((w * f).sum())
        sww += float((w * w).sum())
        swwf += float((w * w * f).sum())
        swa += float((w * w * f * f).sum())  # == swwf for 0/1 f; kept for clarity
        done += take
    warnings = []
    if sw <= 0.0:
        return McsResult(pf=math.nan, half_width=math.inf, n=n, ess=0.0,
                         warnings=("all measurement weights vanished",))
    p = swf / sw
    # delta method on the ratio sum(w f)/sum(w)
    var_num = swa - 2.0 * p * swwf + p * p * sww
    hw = 1.96 * math.sqrt(max(var_num, 0.0)) / sw
    ess = sw * sw / sww if sww > 0 else 0.0
    if ess < 100.0:
        warnings.append(f"effective sample size {ess:.1f} < 100; estimate unstable")
    return McsResult(pf=p, half_width=hw, n=n, ess=ess, warnings=tuple(warnings))
