"""Utility and privacy metrics for pretrained, unlearned and retrained models."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CorruptionSpec, LabeledDataset, stamp_trigger
from .divergences import DivergenceKind, supervised_rows
from .errors import UsageError
from .models import ModelSpec, ParamVector, predict_logits

TAU_EQ = 0.05
TAU_MIA = 0.05

_EVAL_CHUNK = 4096


def _logits(spec, params, x):
    parts = [predict_logits(spec, params, x[i:i + _EVAL_CHUNK]) for i in range(0, x.shape[0], _EVAL_CHUNK)]
    return np.concatenate(parts)


def accuracy(spec: ModelSpec, params: ParamVector, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise UsageError("accuracy of an empty dataset is undefined")
    # argmax returns the first maximum, i.e. ties go to the lowest class
    pred = np.argmax(_logits(spec, params, ds.images), axis=1)
    return float(np.mean(pred == ds.labels))


def per_example_loss(spec: ModelSpec, params: ParamVector, ds: LabeledDataset, kind=DivergenceKind.KL) -> np.ndarray:
    losses, _ = supervised_rows(_logits(spec, params, ds.images), ds.labels, kind)
    return losses


def backdoor_asr(spec: ModelSpec, params: ParamVector, clean_test: LabeledDataset, corruption: CorruptionSpec) -> float:
    """Fraction of triggered non-target test images classified as the target."""
    if corruption.kind != "backdoor":
        raise UsageError(f"backdoor_asr needs a backdoor corruption, got {corruption.kind!r}")
    keep = clean_test.labels != corruption.backdoor_target_class
    if not keep.any():
        raise UsageError("no non-target test images to trigger")
    x = stamp_trigger(clean_test.images[keep], corruption)
    pred = np.argmax(_logits(spec, params, x), axis=1)
    return float(np.mean(pred == corruption.backdoor_target_class))


def threshold_attack(member_losses, nonmember_losses) -> float:
    """Best accuracy of a single loss threshold at separating the two sets.

    Candidate thresholds sit at the midpoints between consecutive distinct
    sorted losses (plus both ends). An attacker may invert the rule, so the
    result lies in [0.5, 1]. Sets are expected to be the same size, making
    plain and balanced accuracy identical.
    """
    m = np.asarray(member_losses, dtype=np.float64)
    nm = np.asarray(nonmember_losses, dtype=np.float64)
    vals = np.concatenate([m, nm])
    is_member = np.concatenate([np.ones(m.size, dtype=np.int64), np.zeros(nm.size, dtype=np.int64)])
    order = np.argsort(vals, kind="stable")
    sv, sm = vals[order], is_member[order]
    # rule "loss <= threshold => member", threshold after position i
    members_below = np.concatenate([[0], np.cumsum(sm)])
    nonmembers_below = np.concatenate([[0], np.cumsum(1 - sm)])
    cut = np.concatenate([[True], sv[1:] != sv[:-1], [True]])
    correct = members_below + (nm.size - nonmembers_below)
    correct = correct[cut]
    total = vals.size
    best = int(np.max(np.maximum(correct, total - correct)))
    return best / total


def brute_force_threshold_attack(member_losses, nonmember_losses) -> float:
    """Reference for :func:`threshold_attack`: try every observed loss as a cut."""
    m = np.asarray(member_losses, dtype=np.float64)
    nm = np.asarray(nonmember_losses, dtype=np.float64)
    total = m.size + nm.size
    best = nm.size  # threshold below every value: everything called non-member
    best = max(best, total - best)
    for v in np.concatenate([m, nm]):
        correct = int(np.sum(m <= v)) + int(np.sum(nm > v))
        best = max(best, correct, total - correct)
    return best / total


def mia_score(spec: ModelSpec, params: ParamVector, forget_set: LabeledDataset, test_set: LabeledDataset, seed: int) -> float:
    if len(forget_set) == 0 or len(test_set) == 0:
        raise UsageError("membership inference needs non-empty member and non-member sets")
    rng = np.random.default_rng(seed)
    k = min(len(forget_set), len(test_set))
    members = forget_set.subset(np.sort(rng.permutation(len(forget_set))[:k]))
    others = test_set.subset(np.sort(rng.permutation(len(test_set))[:k]))
    return threshold_attack(per_example_loss(spec, params, members), per_example_loss(spec, params, others))


@dataclass
class MetricReport:
    test_acc: float
    retain_acc: float
    forget_acc: float
    backdoor_asr: float | None = None
    mia_score: float | None = None
    orderings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    CSV_FIELDS = ("test_acc", "retain_acc", "forget_acc", "backdoor_asr", "mia_score")

    def csv_values(self) -> list[str]:
        return ["" if getattr(self, f) is None else f"{getattr(self, f):.6f}" for f in self.CSV_FIELDS]


def metric_report(
    spec: ModelSpec,
    params: ParamVector,
    *,
    test_set: LabeledDataset,
    retain_set: LabeledDataset,
    forget_set: LabeledDataset,
    corruption: CorruptionSpec,
    mia: bool = False,
    mia_seed: int = 0,
) -> MetricReport:
    return MetricReport(
        test_acc=accuracy(spec, params, test_set),
        retain_acc=accuracy(spec, params, retain_set) if len(retain_set) else 0.0,
        forget_acc=accuracy(spec, params, forget_set) if len(forget_set) else 0.0,
        backdoor_asr=backdoor_asr(spec, params, test_set, corruption) if corruption.kind == "backdoor" else None,
        mia_score=mia_score(spec, params, forget_set, test_set, mia_seed) if mia else None,
    )


def _check(ok: bool, violation: float) -> dict:
    return {"status": "pass" if ok else "fail", "margin": round(max(0.0, violation), 12)}


NA = {"status": "n/a", "margin": None}


def ordering_checks(pretrained: MetricReport, unlearned: MetricReport, oracle: MetricReport | None,
                    scenario_kind: str, tau_eq: float = TAU_EQ, tau_mia: float = TAU_MIA) -> dict:
    """Pass/fail status of the ordering relations a good unlearning run satisfies.

    ``margin`` is how far a check overshoots its tolerance (0 when it passes).
    ``scenario_kind`` is ``"robustness"`` or ``"privacy"``.
    """
    out = {}
    if oracle is not None:
        gap = abs(unlearned.test_acc - oracle.test_acc)
        out["performance_equivalence"] = _check(gap <= tau_eq, gap - tau_eq)
    else:
        out["performance_equivalence"] = dict(NA)
    if scenario_kind == "robustness":
        drop = pretrained.test_acc - unlearned.test_acc
        out["improves_on_pretrained"] = _check(drop <= 0.0, drop)
        if oracle is not None:
            excess = unlearned.test_acc - oracle.test_acc - tau_eq
            out["bounded_by_oracle"] = _check(excess <= 0.0, excess)
        else:
            out["bounded_by_oracle"] = dict(NA)
        out["mia_near_chance"] = dict(NA)
    elif scenario_kind == "privacy":
        out["improves_on_pretrained"] = dict(NA)
        out["bounded_by_oracle"] = dict(NA)
        if unlearned.mia_score is None:
            out["mia_near_chance"] = dict(NA)
        else:
            dev = abs(unlearned.mia_score - 0.5)
            out["mia_near_chance"] = _check(dev <= tau_mia, dev - tau_mia)
    else:
        raise UsageError(f"scenario kind must be 'robustness' or 'privacy', got {scenario_kind!r}")
    return out
