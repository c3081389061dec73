import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relnet.bn import (
    DiscreteBN,
    DiscreteNode,
    Factor,
    ImpossibleEvidenceError,
    _multiply,
    evidence_fingerprint,
)


def chain2():
    a = DiscreteNode("a", ("no", "yes"), table=np.array([0.3, 0.7]))
    b = DiscreteNode("b", ("no", "yes"), parents=("a",),
                     table=np.array([[0.9, 0.1], [0.2, 0.8]]))
    return DiscreteBN([a, b])


def brute_posterior(bn, query, evidence=None):
    """Full joint by enumeration; conditions by zeroing rows."""
    factors = [Factor(n.parents + (n.name,), n.table) for n in bn.nodes.values()]
    full = _multiply(factors)
    table = full.table.copy()
    for name, finding in (evidence or {}).items():
        ax = full.vars.index(name)
        card = bn[name].card
        keep = np.zeros(card)
        if isinstance(finding, (list, tuple, set, frozenset)):
            for s in finding:
                keep[bn[name].state_index(s)] = 1.0
        else:
            keep[bn[name].state_index(finding)] = 1.0
        shape = [1] * table.ndim
        shape[ax] = card
        table = table * keep.reshape(shape)
    p_ev = table.sum()
    qax = full.vars.index(query)
    marg = table.sum(axis=tuple(i for i in range(table.ndim) if i != qax))
    return marg / marg.sum(), float(p_ev)


class TestValidate:
    def test_clean_network(self):
        assert chain2().validate() == []

    def test_row_sum_violation_reported(self):
        bn = chain2()
        bn["b"].table = np.array([[0.9, 0.2], [0.2, 0.8]])
        issues = bn.validate()
        assert len(issues) == 1 and "rows sum off" in issues[0]

    def test_shape_mismatch_reported(self):
        bn = chain2()
        bn["b"].table = np.array([0.5, 0.5])
        assert any("shape" in s for s in bn.validate())

    def test_cycle_reported(self):
        a = DiscreteNode("a", ("0", "1"), parents=("b",), table=np.full((2, 2), 0.5))
        b = DiscreteNode("b", ("0", "1"), parents=("a",), table=np.full((2, 2), 0.5))
        assert any("cycle" in s for s in DiscreteBN([a, b]).validate())

    def test_missing_parent_raises(self):
        with pytest.raises(ValueError, match="missing parent"):
            DiscreteBN([DiscreteNode("a", ("0",), parents=("ghost",), table=np.array([[1.0]]))])

    def test_duplicate_name_raises(self):
        n = DiscreteNode("a", ("0",), table=np.array([1.0]))
        with pytest.raises(ValueError, match="duplicate"):
            DiscreteBN([n, n])


class TestTopology:
    def test_order_respects_edges(self):
        bn = chain2()
        order = bn.topological_order()
        assert order.index("a") < order.index("b")

    def test_children_index(self):
        assert chain2().children["a"] == ["b"]


class TestPosterior:
    def test_prior_marginal_of_leaf(self):
        post = chain2().posterior("b")
        np.testing.assert_allclose(post.probs, [0.3 * 0.9 + 0.7 * 0.2, 0.59], atol=1e-12)
        assert post.evidence_probability == pytest.approx(1.0, abs=1e-9)

    def test_diagnostic_update_hand_computed(self):
        # P(a=yes | b=yes) = .7*.8 / (.3*.1 + .7*.8)
        post = chain2().posterior("a", {"b": "yes"})
        assert post["yes"] == pytest.approx(0.56 / 0.59, abs=1e-12)
        assert post.evidence_probability == pytest.approx(0.59, abs=1e-12)

    def test_evidence_by_index_or_label(self):
        bn = chain2()
        assert bn.posterior("a", {"b": 1})["yes"] == pytest.approx(
            bn.posterior("a", {"b": "yes"})["yes"])

    def test_explaining_away(self):
        rng = np.random.default_rng(7)
        a = DiscreteNode("a", ("0", "1"), table=np.array([0.8, 0.2]))
        b = DiscreteNode("b", ("0", "1"), table=np.array([0.6, 0.4]))
        t = rng.dirichlet(np.ones(2), size=(2, 2))
        c = DiscreteNode("c", ("0", "1"), parents=("a", "b"), table=t)
        bn = DiscreteBN([a, b, c])
        got = bn.posterior("a", {"c": 1, "b": 0}).probs
        want, _ = brute_posterior(bn, "a", {"c": 1, "b": 0})
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_query_with_hard_finding_is_point_mass(self):
        post = chain2().posterior("b", {"b": "yes"})
        np.testing.assert_allclose(post.probs, [0.0, 1.0])
        assert post.evidence_probability == pytest.approx(0.59, abs=1e-12)

    def test_unknown_state_raises(self):
        with pytest.raises(KeyError, match="unknown state"):
            chain2().posterior("a", {"b": "maybe"})

    def test_unknown_node_raises(self):
        with pytest.raises(KeyError, match="no node named"):
            chain2().posterior("zz")


class TestSetFindings:
    def three_state(self):
        a = DiscreteNode("a", ("lo", "mid", "hi"), table=np.array([0.5, 0.3, 0.2]))
        b = DiscreteNode("b", ("0", "1"), parents=("a",),
                         table=np.array([[0.9, 0.1], [0.5, 0.5], [0.1, 0.9]]))
        return DiscreteBN([a, b])

    def test_subset_finding_matches_enumeration(self):
        bn = self.three_state()
        got = bn.posterior("b", {"a": {"lo", "hi"}})
        want, p = brute_posterior(bn, "b", {"a": {"lo", "hi"}})
        np.testing.assert_allclose(got.probs, want, atol=1e-12)
        assert got.evidence_probability == pytest.approx(p, abs=1e-12)

    def test_singleton_set_equals_hard(self):
        bn = self.three_state()
        assert bn.posterior("b", {"a": ["mid"]}).probs == pytest.approx(
            bn.posterior("b", {"a": "mid"}).probs)

    def test_vacuous_set_is_no_evidence(self):
        bn = self.three_state()
        np.testing.assert_allclose(
            bn.posterior("b", {"a": ["lo", "mid", "hi"]}).probs,
            bn.posterior("b").probs)

    def test_boolean_mask_finding(self):
        bn = self.three_state()
        got = bn.posterior("b", {"a": np.array([True, False, True])})
        want, _ = brute_posterior(bn, "b", {"a": {"lo", "hi"}})
        np.testing.assert_allclose(got.probs, want, atol=1e-12)

    def test_set_finding_on_query_restricts_support(self):
        bn = self.three_state()
        post = bn.posterior("a", {"a": ["lo", "mid"]})
        assert post["hi"] == 0.0
        assert post["lo"] == pytest.approx(0.5 / 0.8, abs=1e-12)

    def test_empty_set_raises(self):
        with pytest.raises(ImpossibleEvidenceError):
            self.three_state().posterior("b", {"a": []})


class TestImpossibleEvidence:
    def test_deterministic_contradiction(self):
        a = DiscreteNode("a", ("0", "1"), table=np.array([1.0, 0.0]))
        b = DiscreteNode("b", ("0", "1"), parents=("a",),
                         table=np.array([[1.0, 0.0], [0.0, 1.0]]))
        bn = DiscreteBN([a, b])
        with pytest.raises(ImpossibleEvidenceError):
            bn.posterior("a", {"b": 1})

    def test_joint_contradiction_across_findings(self):
        a = DiscreteNode("a", ("0", "1"), table=np.array([0.5, 0.5]))
        b = DiscreteNode("b", ("0", "1"), parents=("a",),
                         table=np.array([[1.0, 0.0], [0.0, 1.0]]))
        c = DiscreteNode("c", ("0", "1"), parents=("a",),
                         table=np.array([[1.0, 0.0], [0.0, 1.0]]))
        bn = DiscreteBN([a, b, c])
        with pytest.raises(ImpossibleEvidenceError):
            bn.evidence_probability({"b": 0, "c": 1})


class TestEvidenceProbability:
    def test_chain_rule_decomposition(self):
        bn = chain2()
        p_b = bn.evidence_probability({"b": "yes"})
        p_ab = bn.evidence_probability({"a": "yes", "b": "yes"})
        assert p_ab == pytest.approx(0.7 * 0.8, abs=1e-12)
        assert p_ab / p_b == pytest.approx(bn.posterior("a", {"b": "yes"})["yes"], abs=1e-12)

    def test_no_evidence_is_one(self):
        assert chain2().evidence_probability({}) == 1.0

    def test_long_chain_stays_in_range(self):
        # 100 steps at 1e-2 each: the joint probability is ~5e-199, far below
        # what naive products of unnormalized factors could hold if any single
        # intermediate overflowed; per-step renormalization must recover it.
        nodes = [DiscreteNode("x000", ("0", "1"), table=np.array([0.5, 0.5]))]
        for i in range(1, 100):
            nodes.append(DiscreteNode(
                f"x{i:03d}", ("0", "1"), parents=(f"x{i - 1:03d}",),
                table=np.array([[0.99, 0.01], [0.99, 0.01]])))
        bn = DiscreteBN(nodes)
        ev = {f"x{i:03d}": 1 for i in range(100)}
        assert bn.evidence_probability(ev) == pytest.approx(0.5 * 0.01 ** 99, rel=1e-9)


class TestJointPosterior:
    def test_marginals_of_joint_match_single_queries(self):
        rng = np.random.default_rng(3)
        a = DiscreteNode("a", ("0", "1", "2"), table=rng.dirichlet(np.ones(3)))
        b = DiscreteNode("b", ("0", "1"), parents=("a",), table=rng.dirichlet(np.ones(2), size=3))
        c = DiscreteNode("c", ("0", "1"), parents=("a",), table=rng.dirichlet(np.ones(2), size=3))
        d = DiscreteNode("d", ("0", "1"), parents=("b", "c"),
                         table=rng.dirichlet(np.ones(2), size=(2, 2)))
        bn = DiscreteBN([a, b, c, d])
        joint, p_ev = bn.joint_posterior(["b", "c"], {"d": 1})
        assert joint.vars == ("b", "c")
        assert joint.table.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(joint.table.sum(axis=1),
                                   bn.posterior("b", {"d": 1}).probs, atol=1e-12)
        np.testing.assert_allclose(joint.table.sum(axis=0),
                                   bn.posterior("c", {"d": 1}).probs, atol=1e-12)
        assert p_ev == pytest.approx(bn.evidence_probability({"d": 1}), abs=1e-12)

    def test_axis_order_follows_request(self):
        bn = chain2()
        j1, _ = bn.joint_posterior(["a", "b"])
        j2, _ = bn.joint_posterior(["b", "a"])
        np.testing.assert_allclose(j1.table, j2.table.T, atol=1e-15)


def _random_dag(seed):
    """Small random network with mixed cards for oracle comparison."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    nodes = []
    for i in range(n):
        card = int(rng.integers(2, 4))
        k = int(rng.integers(0, min(i, 2) + 1))
        parents = tuple(f"v{j}" for j in sorted(rng.choice(i, size=k, replace=False))) if k else ()
        shape = tuple(next(x.card for x in nodes if x.name == p) for p in parents)
        table = rng.dirichlet(np.ones(card), size=shape) if shape else rng.dirichlet(np.ones(card))
        nodes.append(DiscreteNode(f"v{i}", tuple(map(str, range(card))), parents, table))
    return DiscreteBN(nodes), rng


@given(st.integers(0, 10 ** 6))
@settings(max_examples=120, deadline=None)
def test_ve_matches_enumeration(seed):
    bn, rng = _random_dag(seed)
    names = list(bn.names)
    query = names[int(rng.integers(len(names)))]
    evidence = {}
    for name in names:
        if name == query or rng.random() < 0.5:
            continue
        card = bn[name].card
        if rng.random() < 0.3:
            size = int(rng.integers(1, card + 1))
            states = rng.choice(card, size=size, replace=False)
            evidence[name] = [int(s) for s in states]
        else:
            evidence[name] = int(rng.integers(card))
    try:
        got = bn.posterior(query, evidence)
    except ImpossibleEvidenceError:
        _, p = brute_posterior(bn, query, evidence)
        assert p == pytest.approx(0.0, abs=1e-300)
        return
    want, p_want = brute_posterior(bn, query, evidence)
    np.testing.assert_allclose(got.probs, want, atol=1e-10)
    assert got.evidence_probability == pytest.approx(p_want, rel=1e-9, abs=1e-300)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_elimination_is_deterministic(seed):
    bn, _ = _random_dag(seed)
    q = bn.names[-1]
    first = bn.posterior(q).probs
    again = bn.posterior(q).probs
    np.testing.assert_array_equal(first, again)


class TestIntervalView:
    def interval_node(self):
        return DiscreteNode(
            "load", ("[0,10)", "[10,20)", "[20,inf)"),
            table=np.array([0.2, 0.5, 0.3]),
            borders=np.array([0.0, 10.0, 20.0]),
            reps=np.array([5.0, 14.0, 26.0]))

    def test_density_divides_by_width(self):
        bn = DiscreteBN([self.interval_node()])
        rows = bn.posterior("load").density()
        assert rows[0]["density"] == pytest.approx(0.02)
        assert rows[1]["mass"] == pytest.approx(0.5)
        assert rows[2]["density"] is None and rows[2]["upper"] == math.inf

    def test_mean_uses_representatives(self):
        bn = DiscreteBN([self.interval_node()])
        assert bn.posterior("load").mean() == pytest.approx(0.2 * 5 + 0.5 * 14 + 0.3 * 26)

    def test_plain_node_has_no_density(self):
        with pytest.raises(ValueError, match="not an interval node"):
            chain2().posterior("a").density()


class TestFingerprint:
    def test_order_insensitive(self):
        assert evidence_fingerprint({"a": 1, "b": 2}) == evidence_fingerprint({"b": 2, "a": 1})

    def test_distinguishes_findings(self):
        assert evidence_fingerprint({"a": 1}) != evidence_fingerprint({"a": 2})
        assert evidence_fingerprint({"a": [0, 1]}) != evidence_fingerprint({"a": 1})

    def test_none_is_empty(self):
        assert evidence_fingerprint(None) == evidence_fingerprint({})
