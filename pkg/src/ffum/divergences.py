"""f-divergences between discrete distributions and the losses built on them.

Three generators are supported (natural log throughout)::

    KL           f(t) = t ln t
    ChiSquared   f(t) = (1 - t)^2
    JS           f(t) = t ln(2t / (1 + t)) + ln(2 / (1 + t))

The JS generator gives KL(P||M) + KL(Q||M) with M the midpoint, i.e. twice the
textbook Jensen-Shannon divergence, so it is bounded by 2 ln 2.

``D_f(P || Q) = sum_i q_i f(p_i / q_i)``. Model-produced distributions are
clamped to ``[PROB_EPS, 1]`` and renormalised before any ratio is formed.
Constant one-hot targets are used as-is, with the generator's right limit at
0; the prediction they are compared with is clamped only when its labelled
entry falls below ``PROB_EPS``, since no other entry is divided by.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import softmax
from .errors import ConfigurationError, DomainError, UsageError

PROB_EPS = 1e-7
LN2 = math.log(2.0)


class DivergenceKind(enum.Enum):
    KL = "KL"
    CHI2 = "CHI2"
    JS = "JS"

    @classmethod
    def parse(cls, name) -> "DivergenceKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("Χ", "CHI").replace("²", "2")
        aliases = {"CHISQUARED": "CHI2", "CHI-SQUARED": "CHI2", "CHI^2": "CHI2", "X2": "CHI2"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(
                f"unknown divergence {name!r}; expected one of KL, CHI2, JS"
            ) from None

    @property
    def code(self) -> int:
        return {"KL": kernels.KL, "CHI2": kernels.CHI2, "JS": kernels.JS}[self.value]


@dataclass(frozen=True)
class DivergencePlan:
    """Which generator drives each term of the unlearning objectives.

    The label ``"KL-JS"`` means retain (min) term KL and forget (max) term JS.
    """

    retain_term: DivergenceKind = DivergenceKind.KL
    forget_term: DivergenceKind = DivergenceKind.JS
    supervised_term: DivergenceKind = DivergenceKind.KL

    def __post_init__(self):
        for field in ("retain_term", "forget_term", "supervised_term"):
            object.__setattr__(self, field, DivergenceKind.parse(getattr(self, field)))

    @classmethod
    def from_label(cls, label: str, supervised="KL") -> "DivergencePlan":
        parts = label.split("-")
        if len(parts) != 2:
            raise ConfigurationError(f"divergence plan label {label!r} must look like 'KL-JS'")
        return cls(parts[0], parts[1], supervised)

    @property
    def label(self) -> str:
        return f"{self.retain_term.value}-{self.forget_term.value}"


def generator(kind, t: float) -> float:
    kind = DivergenceKind.parse(kind)
    if t < 0 or math.isnan(t):
        raise DomainError(f"generator defined for t >= 0, got {t}")
    if kind is DivergenceKind.KL:
        return t * math.log(t) if t > 0 else 0.0
    if kind is DivergenceKind.CHI2:
        return (1.0 - t) ** 2
    if t == 0:
        return LN2
    return t * math.log(2.0 * t / (1.0 + t)) + math.log(2.0 / (1.0 + t))


def generator_deriv(kind, t: float) -> float:
    kind = DivergenceKind.parse(kind)
    if not t > 0:
        raise DomainError(f"generator derivative defined for t > 0, got {t}")
    if kind is DivergenceKind.KL:
        return math.log(t) + 1.0
    if kind is DivergenceKind.CHI2:
        return 2.0 * (t - 1.0)
    return math.log(2.0 * t / (1.0 + t))


def clamp_probs(probs: np.ndarray, rows=None):
    """Clamp rows to ``[PROB_EPS, 1]`` and renormalise rows that were touched.

    Returns ``(clamped, vjp)`` where ``vjp(g)`` maps a gradient w.r.t. the
    clamped rows back to the input rows. Rows with no entry below ``PROB_EPS``
    pass through bit-for-bit, as do rows excluded by the boolean ``rows``.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    low = probs < PROB_EPS
    touched = low.any(axis=1)
    if rows is not None:
        touched &= rows
    if not touched.any():
        return probs, lambda g: g
    out = probs.copy()
    c = np.clip(probs[touched], PROB_EPS, 1.0)
    s = c.sum(axis=1, keepdims=True)
    out[touched] = c / s

    def vjp(g):
        g = np.array(g, dtype=np.float64)
        gt = g[touched]
        pt = out[touched]
        dc = (gt - (gt * pt).sum(axis=1, keepdims=True)) / s
        g[touched] = np.where(low[touched], 0.0, dc)
        return g

    return out, vjp


def _as_prob(values, name) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise UsageError(f"{name} must be a 1-D probability vector")
    if np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-9:
        raise UsageError(f"{name} is not a probability vector (sum {arr.sum()!r})")
    return arr


def divergence_rows(P, Q, kind) -> np.ndarray:
    """Row-wise ``D_f(P_i || Q_i)`` for ``[n, k]`` arrays, both clamped."""
    kind = DivergenceKind.parse(kind)
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    if P.shape != Q.shape:
        raise UsageError(f"divergence: shapes {P.shape} and {Q.shape} differ")
    Pc, _ = clamp_probs(P)
    Qc, _ = clamp_probs(Q)
    loss, _, _ = kernels.fdiv_rows(Pc, Qc, kind.code)
    return loss


def divergence(P, Q, kind) -> float:
    P = _as_prob(P, "P")
    Q = _as_prob(Q, "Q")
    if P.shape != Q.shape:
        raise UsageError(f"divergence: lengths {P.size} and {Q.size} differ")
    return float(divergence_rows(P[None], Q[None], kind)[0])


def _softmax_vjp(s, g):
    return s * (g - (g * s).sum(axis=1, keepdims=True))


def distill_rows(student_logits, teacher_probs, kind):
    """Per-row distillation losses ``D_f(softmax(z) || teacher)`` and dL/dz.

    The teacher side is a constant; gradients flow only into the student.
    """
    kind = DivergenceKind.parse(kind)
    z = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    T = np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
    if z.shape != T.shape:
        raise UsageError(f"distill: logits {z.shape} vs teacher {T.shape}")
    s = softmax(z)
    P, p_vjp = clamp_probs(s)
    Q, _ = clamp_probs(T)
    loss, dP, _ = kernels.fdiv_rows(P, Q, kind.code)
    return loss, _softmax_vjp(s, p_vjp(dP))


def supervised_rows(logits, labels, kind):
    """Per-row ``D_f(onehot(y) || softmax(z))`` and dL/dz."""
    kind = DivergenceKind.parse(kind)
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = z.shape
    if labels.shape[0] != n:
        raise UsageError(f"supervised: {labels.shape[0]} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise UsageError(f"supervised: label out of range [0, {k})")
    Y = np.zeros((n, k))
    Y[np.arange(n), labels] = 1.0
    s = softmax(z)
    # only the labelled entry sits under a non-zero numerator
    Q, q_vjp = clamp_probs(s, rows=s[np.arange(n), labels] < PROB_EPS)
    loss, _, dQ = kernels.fdiv_rows(Y, Q, kind.code)
    return loss, _softmax_vjp(s, q_vjp(dQ))


def distill_loss_grad(student_logits, teacher_probs, kind):
    z = np.asarray(student_logits, dtype=np.float64)
    if z.ndim != 1:
        raise UsageError("distill_loss_grad takes a single logit vector")
    T = _as_prob(teacher_probs, "teacher_probs")
    loss, grad = distill_rows(z[None], T[None], kind)
    return float(loss[0]), grad[0]


def supervised_loss_grad(logits, label: int, kind):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise UsageError("supervised_loss_grad takes a single logit vector")
    if not 0 <= int(label) < z.size:
        raise UsageError(f"label {label} out of range [0, {z.size})")
    loss, grad = supervised_rows(z[None], [int(label)], kind)
    return float(loss[0]), grad[0]
