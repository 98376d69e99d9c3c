import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ffum.data import CorruptionSpec, LabeledDataset, synth_blobs
from ffum.errors import UsageError
from ffum.evaluation import (
    MetricReport,
    accuracy,
    backdoor_asr,
    brute_force_threshold_attack,
    mia_score,
    ordering_checks,
    threshold_attack,
)
from ffum.models import ModelSpec, ParamVector, init_params

# losses on a coarse grid, so exp() keeps distinct values distinct in float64
GRID = st.integers(-40, 40).map(lambda k: k / 8)
SPEC = ModelSpec(input_dim=9, hidden_dims=(4,), num_classes=3, use_layer_norm=False)


def constant_model(spec, cls):
    """Zero weights; the head bias alone decides the prediction."""
    p = ParamVector.zeros(spec)
    bias = np.zeros(spec.num_classes)
    if cls is not None:
        bias[cls] = 1.0
    return p.replace_segment("head.bias", bias)


def test_accuracy_constant_predictor():
    ds = synth_blobs(3, 10, 9, 1.0, 0)
    assert accuracy(SPEC, constant_model(SPEC, 2), ds) == pytest.approx(1 / 3)
    # all-equal logits: the tie goes to class 0
    assert accuracy(SPEC, constant_model(SPEC, None), ds) == pytest.approx(1 / 3)


def test_accuracy_perfect_and_permutation_invariant():
    # a linear head reading the one-hot blob centre
    spec = ModelSpec(input_dim=3, hidden_dims=(3,), num_classes=3, use_layer_norm=False)
    p = ParamVector.zeros(spec).replace_segment("dense0.weight", np.eye(3)).replace_segment("head.weight", np.eye(3))
    ds = synth_blobs(3, 20, 3, 1.0, 0, noise=0.05)
    assert accuracy(spec, p, ds) == 1.0
    q = init_params(spec, 3)
    perm = np.random.default_rng(0).permutation(len(ds))
    assert accuracy(spec, q, ds) == accuracy(spec, q, ds.subset(perm))


def test_accuracy_empty_rejected():
    ds = synth_blobs(3, 2, 9, 1.0, 0).subset(np.array([], dtype=int))
    with pytest.raises(UsageError):
        accuracy(SPEC, init_params(SPEC, 0), ds)


def test_asr_target_constant_predictor_is_one():
    ds = synth_blobs(3, 10, 9, 1.0, 0)
    corr = CorruptionSpec("backdoor", backdoor_target_class=1)
    assert backdoor_asr(SPEC, constant_model(SPEC, 1), ds, corr) == 1.0
    assert backdoor_asr(SPEC, constant_model(SPEC, 2), ds, corr) == 0.0
    with pytest.raises(UsageError):
        backdoor_asr(SPEC, constant_model(SPEC, 1), ds, CorruptionSpec())


def test_threshold_attack_examples():
    assert threshold_attack([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert threshold_attack([0.8, 0.9], [0.1, 0.2]) == 1.0
    assert threshold_attack([0.5, 0.5], [0.5, 0.5]) == 0.5
    assert threshold_attack([1.0, 3.0], [2.0, 4.0]) == 0.75


@pytest.mark.parametrize("seed", range(100))
def test_threshold_attack_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    # coarse rounding forces ties across and within the two sets
    m = np.round(rng.normal(size=n) * rng.uniform(0.5, 3), int(rng.integers(0, 3)))
    nm = np.round(rng.normal(loc=rng.uniform(-1, 1), size=n), int(rng.integers(0, 3)))
    assert threshold_attack(m, nm) == brute_force_threshold_attack(m, nm)


@settings(max_examples=60, deadline=None)
@given(st.lists(GRID, min_size=1, max_size=30), st.lists(GRID, min_size=1, max_size=30))
def test_threshold_attack_properties(m, nm):
    m, nm = np.array(m), np.array(nm)
    k = min(m.size, nm.size)
    m, nm = m[:k], nm[:k]
    score = threshold_attack(m, nm)
    assert 0.5 <= score <= 1.0
    assert score == brute_force_threshold_attack(m, nm)
    # strictly increasing transform leaves the rank-based score unchanged
    assert threshold_attack(np.exp(m), np.exp(nm)) == score
    assert threshold_attack(3 * m + 1, 3 * nm + 1) == score


def test_null_case_near_chance():
    scores = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        scores.append(threshold_attack(rng.exponential(size=200), rng.exponential(size=200)))
    assert max(scores) <= 0.58


def test_mia_score_untrained_model_null():
    base = synth_blobs(3, 134, 9, 1.0, 4)
    perm = np.random.default_rng(1).permutation(len(base))
    forget, test = base.subset(perm[:200]), base.subset(perm[200:])
    s = mia_score(SPEC, init_params(SPEC, 0), forget, test, 0)
    assert 0.5 <= s <= 0.58
    assert s == mia_score(SPEC, init_params(SPEC, 0), forget, test, 0)


def test_mia_score_memorised_members():
    # members carry the model's favourite label, non-members another label
    x = np.random.default_rng(0).uniform(size=(60, 9))
    members = LabeledDataset(x[:30], np.zeros(30, int), 3)
    others = LabeledDataset(x[30:], np.full(30, 2), 3)
    model = constant_model(SPEC, 0).replace_segment("head.bias", [8.0, 0.0, 0.0])
    assert mia_score(SPEC, model, members, others, 0) > 0.9


def test_mia_empty_rejected():
    ds = synth_blobs(3, 2, 9, 1.0, 0)
    with pytest.raises(UsageError):
        mia_score(SPEC, init_params(SPEC, 0), ds.subset(np.array([], dtype=int)), ds, 0)


def report(acc, mia=None):
    return MetricReport(test_acc=acc, retain_acc=acc, forget_acc=0.0, mia_score=mia)


def test_ordering_equal_reports_pass_with_zero_margin():
    r = report(0.8)
    out = ordering_checks(r, r, r, "robustness")
    assert out["performance_equivalence"] == {"status": "pass", "margin": 0.0}


def test_ordering_robustness_example():
    out = ordering_checks(report(0.55), report(0.72), report(0.74), "robustness", tau_eq=0.05)
    assert all(out[k]["status"] == "pass" for k in ("performance_equivalence", "improves_on_pretrained", "bounded_by_oracle"))
    assert out["mia_near_chance"]["status"] == "n/a"


def test_ordering_robustness_failure_margin():
    out = ordering_checks(report(0.80), report(0.70), report(0.90), "robustness", tau_eq=0.05)
    assert out["improves_on_pretrained"] == {"status": "fail", "margin": pytest.approx(0.10)}
    assert out["performance_equivalence"]["status"] == "fail"
    assert out["performance_equivalence"]["margin"] == pytest.approx(0.15)


def test_ordering_privacy_mia_example():
    out = ordering_checks(report(0.8), report(0.8, mia=0.62), None, "privacy", tau_mia=0.05)
    assert out["mia_near_chance"]["status"] == "fail"
    assert out["mia_near_chance"]["margin"] == pytest.approx(0.07, abs=1e-12)
    assert out["performance_equivalence"]["status"] == "n/a"
    ok = ordering_checks(report(0.8), report(0.8, mia=0.53), None, "privacy")
    assert ok["mia_near_chance"] == {"status": "pass", "margin": 0.0}


def test_ordering_unknown_kind():
    with pytest.raises(UsageError):
        ordering_checks(report(0.5), report(0.5), None, "speed")


def test_metric_report_csv_values():
    r = MetricReport(0.5, 0.25, 0.125, None, 0.5)
    assert r.csv_values() == ["0.500000", "0.250000", "0.125000", "", "0.500000"]
    assert r.to_dict()["orderings"] == {}
