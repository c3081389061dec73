import numpy as np
import pytest

from relnet.bn import DiscreteBN, DiscreteNode
from relnet.decide import (
    DecisionError,
    expected_utility,
    optimal_decision,
    value_of_information,
)


class _StubCM:
    """Just enough of a compiled model for the decision routines."""

    def __init__(self, bn, decision):
        self.bn = bn
        self.decision = decision
        self.name = "stub"

    def network(self, alternative=None):
        return self.bn


def test_model_without_decision_block_is_refused(frame_cm):
    with pytest.raises(DecisionError, match="declares no decision"):
        expected_utility(frame_cm, "keep")


def test_unknown_alternative_is_refused(lifecycle_cm):
    with pytest.raises(DecisionError, match="unknown alternative 'sell'"):
        expected_utility(lifecycle_cm, "sell")


def test_expected_utility_decomposes_over_the_posterior(lifecycle_cm):
    pf_keep = lifecycle_cm.network("keep").posterior("E20")["fail"]
    assert expected_utility(lifecycle_cm, "keep") == pytest.approx(-1e5 * pf_keep)
    pf_repl = lifecycle_cm.network("replace").posterior("ER20")["fail"]
    assert expected_utility(lifecycle_cm, "replace") == pytest.approx(-1e4 - 1e5 * pf_repl)


def test_prior_decision_keeps_the_structure(lifecycle_cm):
    res = optimal_decision(lifecycle_cm)
    assert res.best == "keep"
    assert res.alternatives == ("keep", "replace")
    assert res.utilities["keep"] > res.utilities["replace"]


def test_low_readings_flip_the_decision(lifecycle_cm):
    low = optimal_decision(lifecycle_cm,
                           evidence={"M4": "[115,125)", "M5": "[115,125)"})
    assert low.best == "replace"
    high = optimal_decision(lifecycle_cm,
                            evidence={"M4": "[175,185)", "M5": "[175,185)"})
    assert high.best == "keep"
    assert low.evidence_key != high.evidence_key


def test_exact_tie_prefers_earliest_declared():
    u = DiscreteNode("U", ("a", "b"), table=np.array([0.5, 0.5]))
    cm = _StubCM(DiscreteBN([u]), {
        "alternatives": ["first", "second"],
        "action_utility": {"first": 0.0, "second": 0.0},
        "utilities": [{"node": "U", "values": {"a": 10.0}}],
    })
    res = optimal_decision(cm)
    assert res.utilities["first"] == res.utilities["second"]
    assert res.best == "first"


def test_voi_invariants(lifecycle_cm):
    v4 = value_of_information(lifecycle_cm, ["M4"])
    v5 = value_of_information(lifecycle_cm, ["M5"])
    v45 = value_of_information(lifecycle_cm, ["M4", "M5"])
    for v in (v4, v5, v45):
        assert v.value >= 0.0
        assert v.prior_best == "keep"
    # more information can only help
    assert v45.value >= v4.value - 1e-9
    assert v45.value >= v5.value - 1e-9
    assert v45.state_count == 441


def test_voi_base_matches_direct_expected_utility(lifecycle_cm):
    v = value_of_information(lifecycle_cm, ["M4"])
    assert v.prior_utility == pytest.approx(
        expected_utility(lifecycle_cm, "keep"), abs=1e-9)


def test_voi_under_prior_evidence_stays_well_formed(lifecycle_cm):
    v = value_of_information(lifecycle_cm, ["M4"], evidence={"E5": "survive"})
    assert v.value >= 0.0
    assert v.prior_utility == pytest.approx(
        max(expected_utility(lifecycle_cm, a, {"E5": "survive"})
            for a in ("keep", "replace")), abs=1e-9)


def test_voi_refuses_observed_measurement(lifecycle_cm):
    with pytest.raises(DecisionError, match="already observed"):
        value_of_information(lifecycle_cm, ["M4"], evidence={"M4": "[95,105)"})


def test_voi_refuses_empty_set(lifecycle_cm):
    with pytest.raises(DecisionError, match="no measurement nodes"):
        value_of_information(lifecycle_cm, [])


def test_voi_joint_state_cap():
    big = 1.0 / 1001 * np.ones(1001)
    m1 = DiscreteNode("m1", tuple(map(str, range(1001))), table=big)
    m2 = DiscreteNode("m2", tuple(map(str, range(1001))), table=big)
    cm = _StubCM(DiscreteBN([m1, m2]), {
        "alternatives": ["only"],
        "utilities": [{"node": "m1", "values": {"0": 1.0}}],
    })
    with pytest.raises(DecisionError, match="cap"):
        value_of_information(cm, ["m1", "m2"])
