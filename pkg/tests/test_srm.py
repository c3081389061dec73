"""Reliability kernel: transform, FORM, multinormal CDF, series systems, MCS.

Oracles here are independent of the implementation under test: closed forms
for linear/lognormal margins, scipy.optimize for design points, scipy.stats
for multinormal CDFs, and brute quadrature.
"""

import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from relnet import srm
from relnet.dists import CommonFactorGroup, Gamma, Gumbel, Lognormal, Normal
from relnet.expr import parse
from relnet.srm import (
    FormOptions,
    ReliabilityProblem,
    StandardSpace,
    conditional_mcs,
    form_component,
    form_components,
    form_series,
    mcs,
    mvn_cdf,
    phi2,
    phi3,
    series_pf,
)


def _problem(independents, limit_states, groups=(), fixed=None):
    return ReliabilityProblem(
        independents=independents,
        limit_states={k: parse(v) for k, v in limit_states.items()},
        factor_groups=tuple(groups),
        fixed=fixed or {},
    )


# ---------- problem validation ----------

def test_problem_validation():
    with pytest.raises(ValueError, match="undeclared"):
        _problem({"x": Normal(0, 1)}, {"g": "x + y"})
    with pytest.raises(ValueError, match="repeat"):
        g = CommonFactorGroup({"x": Lognormal(0, 1), "y": Lognormal(0, 1)}, 0.3)
        _problem({"x": Normal(0, 1)}, {"g": "x"}, groups=[g])
    p = _problem({"x": Normal(0, 1)}, {"g": "x + c"}, fixed={"c": 2.0})
    assert p.free_names == ("x",)
    with pytest.raises(KeyError):
        p.pin({"zzz": 1.0})


def test_pin_moves_to_fixed():
    g = CommonFactorGroup({"r1": Lognormal(5, 0.2), "r2": Lognormal(5, 0.2)}, 0.3)
    p = _problem({"h": Gumbel.from_moments(50, 20)}, {"g": "r1 + r2 - h"}, groups=[g])
    q = p.pin({"r1": 140.0})
    assert "r1" in q.fixed and q.free_names == ("r2", "h")
    s = p.pin({"r1": 140.0}, mode="substitute")
    assert "r1" in s.substituted


# ---------- standard-space transform ----------

def test_transform_reproduces_marginals_and_correlation():
    group = CommonFactorGroup(
        {f"r{i}": Lognormal.from_moments(150, 30) for i in (1, 2, 3)}, 0.3)
    p = _problem({"h": Gumbel.from_moments(50, 20), "v": Gamma.from_moments(60, 12)},
                 {"g": "r1 + r2 + r3 - h - v"}, groups=[group])
    space = StandardSpace(p)
    assert space.ndim == 1 + 3 + 2  # factor + 3 idio + 2 independents
    rng = np.random.Generator(np.random.Philox(key=[7, 0]))
    u = rng.standard_normal((400_000, space.ndim))
    phys = space.to_physical(u)
    logs = np.column_stack([np.log(phys[f"r{i}"]) for i in (1, 2, 3)])
    member = group.members["r1"]
    assert logs.mean(axis=0) == pytest.approx([member.log_mean] * 3, abs=2e-3)
    assert logs.std(axis=0) == pytest.approx([member.log_std] * 3, abs=2e-3)
    c = np.corrcoef(logs, rowvar=False)
    assert c[0, 1] == pytest.approx(0.3, abs=5e-3)
    assert phys["h"].mean() == pytest.approx(50, abs=0.2)
    assert phys["h"].std() == pytest.approx(20, abs=0.2)
    assert phys["v"].mean() == pytest.approx(60, abs=0.1)


def test_transform_jacobian_matches_finite_differences():
    group = CommonFactorGroup({"r1": Lognormal(5, 0.2), "r2": Lognormal(5, 0.2)}, 0.3)
    p = _problem({"h": Gumbel.from_moments(50, 20), "v": Gamma.from_moments(60, 12),
                  "w": Normal(3, 2)},
                 {"g": "r1 + 2*r2 - h - v - w"}, groups=[group])
    ls = p.limit_states["g"]
    space = StandardSpace(p)
    u0 = np.array([[0.3, -0.8, 0.5, 1.1, -0.4, 0.2]])

    def g_of(u_flat):
        phys = space.to_physical(u_flat[None, :])
        return float(ls({k: v[0] for k, v in phys.items()}))

    phys0 = space.to_physical(u0)
    _, grad_x = ls.gradient({k: v[0] for k, v in phys0.items()})
    grad_u = space.gradient_to_u(u0, phys0, grad_x)[0]
    h = 1e-6
    for j in range(space.ndim):
        up, dn = u0[0].copy(), u0[0].copy()
        up[j] += h
        dn[j] -= h
        fd = (g_of(up) - g_of(dn)) / (2 * h)
        assert grad_u[j] == pytest.approx(fd, rel=2e-5, abs=1e-7), j


def test_conditioned_pin_shifts_free_members():
    """Pinning one member low must drag the other member's conditional down."""
    marg = Lognormal.from_moments(150, 30)
    group = CommonFactorGroup({"r1": marg, "r2": marg}, 0.3)
    p = _problem({}, {"g": "r2 - 100"}, groups=[group]).pin({"r1": 90.0})
    space = StandardSpace(p)
    (ch,) = space.members
    z1 = (math.log(90.0) - marg.log_mean) / marg.log_std
    # exact bivariate-normal conditional of ln r2 given ln r1
    want_mean = marg.log_mean + 0.3 * marg.log_std * z1
    want_var = marg.log_std**2 * (1 - 0.3**2)
    assert ch.log_offset == pytest.approx(want_mean, rel=1e-12)
    assert ch.factor_loading**2 + ch.idio_loading**2 == pytest.approx(want_var, rel=1e-12)
    # substitution mode leaves r2 at its marginal
    ps = _problem({}, {"g": "r2 - 100"}, groups=[group]).pin({"r1": 90.0}, mode="substitute")
    chs = StandardSpace(ps).members[0]
    assert chs.log_offset == pytest.approx(marg.log_mean)
    assert chs.factor_loading**2 + chs.idio_loading**2 == pytest.approx(marg.log_std**2)


# ---------- multinormal CDF ----------

def test_phi2_against_scipy():
    rng = np.random.Generator(np.random.Philox(key=[11, 0]))
    for _ in range(40):
        h, k = rng.uniform(-4, 4, 2)
        rho = rng.uniform(-0.99, 0.99)
        want = stats.multivariate_normal(cov=[[1, rho], [rho, 1]]).cdf([h, k])
        assert phi2(h, k, rho) == pytest.approx(want, abs=5e-10)


def test_phi2_special_points():
    assert phi2(0.0, 0.0, 0.5) == pytest.approx(0.25 + math.asin(0.5) / (2 * math.pi), abs=1e-12)
    assert phi2(1.2, 0.4, 0.0) == pytest.approx(
        float(stats.norm.cdf(1.2) * stats.norm.cdf(0.4)), abs=1e-12)
    assert phi2(1.0, 2.0, 1.0) == pytest.approx(float(stats.norm.cdf(1.0)), abs=1e-12)
    assert phi2(0.5, -0.5, -1.0) == pytest.approx(
        float(stats.norm.cdf(0.5) + stats.norm.cdf(-0.5) - 1.0), abs=1e-12)
    # vectorized
    out = phi2(np.array([0.0, 1.2]), np.array([0.0, 0.4]), np.array([0.5, 0.0]))
    assert out.shape == (2,)


def test_phi3_against_scipy():
    # scipy's Genz integrator runs at ~1e-5 default tolerance, so it only
    # anchors the ballpark; the equicorrelated oracle below pins precision
    rng = np.random.Generator(np.random.Philox(key=[13, 0]))
    for _ in range(25):
        b = rng.uniform(-3.5, 3.5, 3)
        a = rng.uniform(-1, 1, (3, 3))
        cov = a @ a.T + np.eye(3) * 0.3
        d = np.sqrt(np.diag(cov))
        R = cov / np.outer(d, d)
        want = stats.multivariate_normal(cov=R, allow_singular=True).cdf(b)
        assert phi3(b, R) == pytest.approx(want, abs=2e-5)


def test_phi3_independence_product():
    b = np.array([0.7, -0.4, 1.9])
    want = float(np.prod(stats.norm.cdf(b)))
    assert phi3(b, np.eye(3)) == pytest.approx(want, abs=1e-11)


def test_phi3_equicorrelated_factor_integral():
    """Closed 1-D factor integral for equicorrelated normals."""
    rho, b = 0.4, np.array([1.1, 0.2, -0.6])

    def integrand(t):
        p = stats.norm.cdf((b - math.sqrt(rho) * t) / math.sqrt(1 - rho))
        return stats.norm.pdf(t) * float(np.prod(p))

    from scipy.integrate import quad
    want, _ = quad(integrand, -9, 9, epsabs=1e-13)
    R = np.full((3, 3), rho) + np.eye(3) * (1 - rho)
    assert phi3(b, R) == pytest.approx(want, abs=1e-9)


def test_phi3_degenerate_pair():
    b = np.array([0.8, 0.1, 0.5])
    R = np.array([[1.0, 0.2, 1.0], [0.2, 1.0, 0.2], [1.0, 0.2, 1.0]])
    want = phi2(min(0.8, 0.5), 0.1, 0.2)
    assert phi3(b, R) == pytest.approx(want, abs=1e-10)


def test_mvn_cdf_dimensions():
    assert mvn_cdf(np.array([0.0]), np.eye(1)) == pytest.approx(0.5)
    with pytest.raises(ValueError, match="k <= 3"):
        mvn_cdf(np.zeros(4), np.eye(4))


# ---------- FORM ----------

def test_form_exact_on_linear_normal():
    # g = 3 + 2 x1 - x2, x1 ~ N(1, 0.5), x2 ~ N(2, 1.5): beta in closed form
    p = _problem({"x1": Normal(1, 0.5), "x2": Normal(2, 1.5)}, {"g": "3 + 2*x1 - x2"})
    res = form_component(p, "g")
    want_beta = (3 + 2 * 1 - 2) / math.sqrt((2 * 0.5) ** 2 + 1.5**2)
    assert res.converged and not res.trivial
    assert res.beta == pytest.approx(want_beta, abs=1e-8)
    # alpha is the normalized negative gradient
    assert res.alpha @ res.alpha == pytest.approx(1.0, abs=1e-12)
    assert res.n_iter <= 5


def test_form_exact_on_lognormal_ratio():
    r = Lognormal.from_moments(150, 30)
    s = Lognormal.from_moments(90, 27)
    p = _problem({"r": r, "s": s}, {"g": "r - s"})
    res = form_component(p, "g")
    want = (r.log_mean - s.log_mean) / math.hypot(r.log_std, s.log_std)
    assert res.converged
    assert res.beta == pytest.approx(want, abs=1e-7)
    # design point sits on the limit surface
    assert res.x_star["r"] == pytest.approx(res.x_star["s"], rel=1e-6)


def test_form_lognormal_vs_deterministic_demand():
    r = Lognormal.from_moments(150, 30)
    p = _problem({"r": r}, {"g": "r - 100"})
    res = form_component(p, "g")
    want = (r.log_mean - math.log(100)) / r.log_std
    assert res.beta == pytest.approx(want, abs=1e-9)
    assert res.pf == pytest.approx(float(r.cdf(100.0)), rel=1e-7)


def test_form_design_point_matches_constrained_optimizer():
    """Curved limit state with a unique design point: check against scipy's
    constrained minimizer started from several points."""
    p = _problem({"x1": Normal(0, 1), "x2": Normal(0, 1)},
                 {"g": "2.5 - x2 + 0.2*x1*x1 - x1"})
    res = form_component(p, "g")
    assert res.converged

    con = optimize.NonlinearConstraint(
        lambda u: 2.5 - u[1] + 0.2 * u[0] ** 2 - u[0], 0.0, 0.0)
    best = min(
        (optimize.minimize(lambda u: u @ u, x0, constraints=[con]) for x0 in
         ([0.0, 2.5], [1.5, 1.5], [-1.5, 4.0])),
        key=lambda r: r.fun)
    assert res.beta == pytest.approx(math.sqrt(best.fun), abs=1e-5)


def test_form_negative_beta_when_failure_likely():
    p = _problem({"x": Normal(0, 1)}, {"g": "-1 - x"})  # fails when x > -1
    res = form_component(p, "g")
    assert res.beta == pytest.approx(-1.0, abs=1e-8)
    assert res.pf == pytest.approx(float(stats.norm.cdf(1.0)), rel=1e-9)


def test_form_constant_g_is_trivial():
    p = _problem({"x": Normal(0, 1)}, {"safe": "1", "doomed": "-1"})
    safe = form_component(p, "safe")
    doomed = form_component(p, "doomed")
    assert safe.trivial and safe.pf == 0.0
    assert doomed.trivial and doomed.pf == 1.0


def test_form_flags_non_convergence():
    p = _problem({"x1": Normal(0, 1), "x2": Normal(0, 1)},
                 {"g": "3 - x2 - 0.3 * x1 * x1"})
    res = form_component(p, "g", options=FormOptions(max_iter=1))
    assert not res.converged


def test_form_grid_matches_scalar_solves_bitwise():
    r = Lognormal.from_moments(150, 30)
    group = CommonFactorGroup({"r1": r, "r2": r}, 0.3)
    base = _problem({"h": Gumbel.from_moments(50, 20)},
                    {"g": "r1 + r2 - 4*h + c"}, groups=[group], fixed={"c": 0.0})
    pins = {"c": np.array([-30.0, 0.0, 25.0, 60.0])}
    grid = form_components(base, "g", pins=pins)
    for i, c in enumerate(pins["c"]):
        one = form_components(base.pin({"c": float(c)}), "g")
        assert grid.beta[i] == one.beta[0]  # bit-identical
        np.testing.assert_array_equal(grid.alpha[i], one.alpha[0])


def test_form_grid_chunking_is_bitwise_stable():
    r = Lognormal.from_moments(150, 30)
    base = _problem({"r": r, "h": Gumbel.from_moments(50, 20)},
                    {"g": "r - h + c"}, fixed={"c": 0.0})
    cs = np.linspace(-40, 40, 9)
    whole = form_components(base, "g", pins={"c": cs})
    parts = [form_components(base, "g", pins={"c": chunk}) for chunk in np.split(cs, 3)]
    np.testing.assert_array_equal(whole.beta, np.concatenate([p.beta for p in parts]))


# ---------- series systems ----------

def test_series_two_independent_modes_exact():
    p = _problem({"x1": Normal(0, 1), "x2": Normal(0, 1)},
                 {"ga": "2.2 - x1", "gb": "1.7 - x2"})
    res = series_pf(p)
    p1, p2 = float(stats.norm.cdf(-2.2)), float(stats.norm.cdf(-1.7))
    assert res.pf == pytest.approx(1 - (1 - p1) * (1 - p2), rel=1e-9)
    assert res.bound_low == pytest.approx(max(p1, p2), rel=1e-9)
    assert res.bound_high == pytest.approx(p1 + p2, rel=1e-9)
    assert res.bound_low <= res.pf <= res.bound_high


def test_series_three_fully_dependent_modes():
    # all three modes are the same event: union equals the single mode
    p = _problem({"x": Normal(0, 1)}, {"g1": "2 - x", "g2": "2 - x", "g3": "2 - x"})
    res = series_pf(p)
    assert res.pf == pytest.approx(float(stats.norm.cdf(-2.0)), rel=1e-6)


def test_series_drops_certain_safe_mode():
    p = _problem({"x": Normal(0, 1)}, {"g1": "2 - x", "far": "40 - x"})
    res = series_pf(p)
    assert res.pf == pytest.approx(float(stats.norm.cdf(-2.0)), rel=1e-9)


def test_series_certain_failure_dominates():
    p = _problem({"x": Normal(0, 1)}, {"g1": "2 - x", "doom": "-1"})
    assert series_pf(p).pf == 1.0


def test_series_matches_mcs_on_correlated_modes():
    group = CommonFactorGroup(
        {f"r{i}": Lognormal.from_moments(150, 30) for i in (1, 2, 3)}, 0.3)
    p = _problem({"h": Gumbel.from_moments(50, 20)},
                 {"g1": "r1 + r2 - 5.5*h", "g2": "r2 + 2*r3 - 6*h", "g3": "r1 + r3 - 5.2*h"},
                 groups=[group])
    approx = series_pf(p)
    sim = mcs(p, n=400_000, seed=3)
    # first-order answer should sit within a few MC half widths
    assert abs(approx.pf - sim.pf) < 3 * sim.half_width + 0.02 * sim.pf
    assert approx.bound_low <= approx.pf <= approx.bound_high + 1e-12


def test_series_rejects_more_than_three_live_modes():
    p = _problem({"x": Normal(0, 1)},
                 {f"g{i}": f"{1 + 0.1 * i} - x" for i in range(4)})
    with pytest.raises(ValueError, match="up to 3"):
        series_pf(p)


# ---------- curvature-corrected solves ----------

def _parabolic_pf(c0, a):
    # failure set {x >= c0 + a*y^2} has a one-dimensional quadrature oracle
    val, _ = integrate.quad(
        lambda v: stats.norm.pdf(v) * stats.norm.cdf(-(c0 + a * v * v)),
        -12, 12, epsabs=1e-14)
    return val


def test_curvature_exact_for_single_curved_direction():
    # one curved direction is the case the correction integrates exactly,
    # convex or concave, origin on either side of the surface
    for c0, a in [(2.5, 0.3), (2.5, -0.15), (1.2, 0.08), (-0.8, 0.2)]:
        p = _problem({"x": Normal(0, 1), "y": Normal(0, 1)},
                     {"g": f"{c0} - x + {a}*y*y"})
        res = form_component(p, "g", options=FormOptions(curvature=True))
        assert res.pf == pytest.approx(_parabolic_pf(c0, a), rel=2e-4), (c0, a)


def test_curvature_default_off_keeps_first_order_result():
    p = _problem({"x": Normal(0, 1), "y": Normal(0, 1)}, {"g": "2.5 - x + 0.3*y*y"})
    res = form_component(p, "g")
    assert res.beta == pytest.approx(2.5, abs=1e-6)
    assert res.pf == pytest.approx(float(stats.norm.cdf(-2.5)), rel=1e-6)


def test_curvature_continuous_across_zero_beta():
    opt = FormOptions(curvature=True)
    pfs = []
    for c0 in (0.02, -0.02):
        p = _problem({"x": Normal(0, 1), "y": Normal(0, 1)},
                     {"g": f"{c0} - x + 0.2*y*y"})
        pfs.append(form_component(p, "g", options=opt).pf)
    assert abs(pfs[0] - pfs[1]) < 0.02


def test_pair_joint_tracks_curved_overlap():
    # flat margin {x >= c1} against curved margin {y >= c2 + a*x^2}; the
    # pair probability has an exact quadrature oracle to back the union out of
    c1, c2, a = 1.2, 1.0, 0.25
    p = _problem({"x": Normal(0, 1), "y": Normal(0, 1)},
                 {"gx": f"{c1} - x", "gy": f"{c2} - y + {a}*x*x"})
    exact = integrate.quad(
        lambda t: stats.norm.pdf(t) * stats.norm.cdf(-(c2 + a * t * t)),
        c1, 12, epsabs=1e-14)[0]
    sg = form_series(p, options=FormOptions(curvature=True))
    m1 = float(stats.norm.cdf(-c1))
    m2 = _parabolic_pf(c2, a)
    joint = m1 + m2 - float(sg.pf[0])
    # the independent-tangent answer (rho = 0 between the two alphas)
    naive = m1 * stats.norm.cdf(-c2)
    assert joint == pytest.approx(exact, rel=0.12)
    assert abs(joint - exact) < 0.1 * abs(naive - exact)


def test_series_curvature_tracks_mcs_on_correlated_modes():
    group = CommonFactorGroup(
        {f"r{i}": Lognormal.from_moments(150, 30) for i in range(1, 6)}, 0.3)
    p = _problem({"h": Gumbel.from_moments(50, 20), "v": Gamma.from_moments(60, 12)},
                 {"sway": "r1 + r2 + r4 + r5 - 5*h",
                  "beam": "r2 + 2*r3 + r4 - 5*v",
                  "combined": "r1 + 2*r3 + 2*r4 + r5 - 5*h - 5*v"},
                 groups=[group]).pin({"r4": 115.0, "r5": 115.0})
    curved = form_series(p, options=FormOptions(curvature=True))
    sim = mcs(p, n=1_500_000, seed=7, solve_id=115115)
    assert abs(float(curved.pf[0]) - sim.pf) < 2 * sim.half_width + 0.005 * sim.pf
    # the first-order union misses this cell by several half widths
    plain = form_series(p)
    assert abs(float(plain.pf[0]) - sim.pf) > abs(float(curved.pf[0]) - sim.pf)


def test_curvature_grid_chunking_is_bitwise_stable():
    r = Lognormal.from_moments(150, 30)
    base = _problem({"r": r, "h": Gumbel.from_moments(50, 20),
                     "v": Gamma.from_moments(60, 12)},
                    {"g1": "r - h + c", "g2": "2*r - 3*v + c"}, fixed={"c": 0.0})
    cs = np.linspace(-40, 40, 9)
    opt = FormOptions(curvature=True)
    whole = form_series(base, pins={"c": cs}, options=opt)
    parts = [form_series(base, pins={"c": chunk}, options=opt)
             for chunk in np.split(cs, 3)]
    np.testing.assert_array_equal(whole.pf, np.concatenate([p.pf for p in parts]))


# ---------- Monte Carlo ----------

def test_mcs_matches_exact_linear_case():
    p = _problem({"x1": Normal(1, 0.5), "x2": Normal(2, 1.5)}, {"g": "3 + 2*x1 - x2"})
    exact = float(stats.norm.cdf(-(3 + 2 - 2) / math.sqrt(1.0 + 2.25)))
    res = mcs(p, n=500_000, seed=11)
    assert abs(res.pf - exact) < 3 * res.half_width
    assert res.ess == res.n


def test_mcs_deterministic_per_seed_and_solve_id():
    p = _problem({"x": Normal(0, 1)}, {"g": "1.5 - x"})
    a = mcs(p, n=40_000, seed=5, solve_id=7)
    b = mcs(p, n=40_000, seed=5, solve_id=7)
    c = mcs(p, n=40_000, seed=5, solve_id=8)
    assert a.pf == b.pf
    assert a.pf != c.pf


def test_mcs_batching_does_not_change_the_stream():
    p = _problem({"x": Normal(0, 1)}, {"g": "1.5 - x"})
    a = mcs(p, n=50_000, seed=5, solve_id=1, batch=50_000)
    b = mcs(p, n=50_000, seed=5, solve_id=1, batch=7_000)
    assert a.pf == b.pf


def test_mcs_trivial_domains():
    p = _problem({"x": Normal(0, 1)}, {"doom": "-1", "safe": "1"})
    assert mcs(p, ["doom"], n=10_000, seed=1).pf == 1.0
    assert mcs(p, ["safe"], n=10_000, seed=1).pf == 0.0


def test_conditional_mcs_matches_conjugate_gaussian():
    """Measuring a normal capacity with normal noise has an exact posterior."""
    mu, sig, noise_sd, observed, demand = 150.0, 30.0, 15.0, 120.0, 100.0
    p = _problem({"r": Normal(mu, sig)}, {"g": "r - 100"})
    post_var = 1.0 / (1.0 / sig**2 + 1.0 / noise_sd**2)
    post_mean = post_var * (mu / sig**2 + observed / noise_sd**2)
    exact = float(stats.norm.cdf((demand - post_mean) / math.sqrt(post_var)))
    res = conditional_mcs(p, ["g"], measurements=[("r", observed, Normal(0, noise_sd))],
                          n=400_000, seed=21)
    assert res.ess > 1000
    assert abs(res.pf - exact) < 3 * res.half_width
    # the conditioned answer is well separated from the prior pf, and the
    # estimator tracked the conditioned one
    prior = float(stats.norm.cdf((demand - mu) / sig))
    assert abs(exact - prior) > 10 * res.half_width
    assert abs(res.pf - prior) > 5 * res.half_width


def test_conditional_mcs_ess_warning():
    p = _problem({"r": Normal(150, 30)}, {"g": "r - 100"})
    res = conditional_mcs(p, ["g"], measurements=[("r", 150.0, Normal(0, 1e-4))],
                          n=20_000, seed=2)
    assert res.ess < 100
    assert any("effective sample size" in w for w in res.warnings)


def test_conditional_mcs_unknown_measurement_target():
    p = _problem({"r": Normal(150, 30)}, {"g": "r - 100"})
    with pytest.raises(KeyError):
        conditional_mcs(p, ["g"], measurements=[("q", 1.0, Normal(0, 1))], n=1000, seed=0)
