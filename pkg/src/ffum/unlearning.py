"""Federated unlearning by alternating divergence maximisation and minimisation.

Each unlearning round has two exchanges with the server:

* max phase: every client holding forget data runs gradient *ascent* on the
  mean forget-term divergence between its model and a frozen teacher; the
  server averages the results with weights ``n_f^(c) / n_f``;
* min phase: every client holding retain data runs descent on
  ``alpha * distill + gamma * supervised`` over its retain data; weights
  ``n_r^(c) / n_r``.

Afterwards ``post_rounds`` min-only rounds follow. A fully forgotten client
has ``n_r = 0`` and never contributes to a min aggregate; a client with no
forget data has ``n_f = 0`` and sits out the max phase.

Baselines: retraining from scratch on retained data, projected loss ascent
followed by fine-tuning, and first-layer weight negation followed by
fine-tuning.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import softmax
from .data import LabeledDataset
from .divergences import DivergenceKind, DivergencePlan, distill_rows, supervised_rows
from .errors import ConfigurationError
from .evaluation import accuracy, per_example_loss
from .federation import (
    FederationState,
    RoundConfig,
    aggregate,
    fedavg_round,
    fl_pretrain,
    local_sgd,
    run_clients,
    SupervisedLoss,
)
from .models import ModelSpec, ParamVector, init_params, loss_and_grad, param_axpy, param_distance, predict_logits

TEACHER_POLICIES = ("initial_model", "previous_round")


@dataclass(frozen=True)
class FfumConfig:
    rounds_R: int = 2
    post_rounds: int = 3
    eta_max: float = 0.05
    eta_min: float = 0.05
    epochs_max: int = 1
    epochs_min: int = 1
    epochs_post: int = 1
    alpha: float = 0.5
    gamma: float = 1.0
    plan: DivergencePlan = field(default_factory=DivergencePlan)
    teacher_policy: str = "initial_model"
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("rounds_R", "post_rounds"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        for name in ("epochs_max", "epochs_min", "epochs_post", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        for name in ("alpha", "gamma", "eta_max", "eta_min"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.teacher_policy not in TEACHER_POLICIES:
            raise ConfigurationError(f"teacher_policy must be one of {TEACHER_POLICIES}")
        if isinstance(self.plan, str):
            object.__setattr__(self, "plan", DivergencePlan.from_label(self.plan))


@dataclass
class UnlearnResult:
    final_params: ParamVector
    per_round_metrics: list[dict] = field(default_factory=list)
    comm_rounds_used: int = 0
    # one entry per exchange: {"round", "phase", "weights": {client_id: weight}}
    aggregation_log: list[dict] = field(default_factory=list)
    # Halimi only: distance to the ball centre after every projected step
    projection_distances: list[float] = field(default_factory=list)
    wall_ms: float = 0.0

    def summary(self) -> dict:
        return {
            "comm_rounds_used": self.comm_rounds_used,
            "per_round_metrics": self.per_round_metrics,
            "aggregation_log": [
                {**e, "weights": {str(k): v for k, v in e["weights"].items()}} for e in self.aggregation_log
            ],
            "wall_ms": self.wall_ms,
        }


class MaxLoss:
    """Mean forget-term divergence between the student and a frozen teacher."""

    def __init__(self, spec: ModelSpec, teacher_probs: np.ndarray, kind):
        self.spec = spec
        self.teacher_probs = teacher_probs
        self.kind = DivergenceKind.parse(kind)

    def __call__(self, params, x, y, rows):
        T = self.teacher_probs[rows]

        def head(logits):
            losses, grad = distill_rows(logits, T, self.kind)
            return losses.mean(), grad / losses.shape[0]

        return loss_and_grad(self.spec, params, x, head)


class MinLoss:
    """``alpha * distill(retain_term) + gamma * supervised(supervised_term)``, batch means."""

    def __init__(self, spec: ModelSpec, teacher_probs: np.ndarray, plan: DivergencePlan, alpha: float, gamma: float):
        self.spec = spec
        self.teacher_probs = teacher_probs
        self.plan = plan
        self.alpha = float(alpha)
        self.gamma = float(gamma)

    def __call__(self, params, x, y, rows):
        T = self.teacher_probs[rows]

        def head(logits):
            n = logits.shape[0]
            loss, grad = 0.0, np.zeros_like(logits)
            if self.alpha:
                dl, dg = distill_rows(logits, T, self.plan.retain_term)
                loss += self.alpha * dl.mean()
                grad += (self.alpha / n) * dg
            if self.gamma:
                sl, sg = supervised_rows(logits, y, self.plan.supervised_term)
                loss += self.gamma * sl.mean()
                grad += (self.gamma / n) * sg
            return loss, grad

        return loss_and_grad(self.spec, params, x, head)


def teacher_probs(spec, teacher: ParamVector, x) -> np.ndarray:
    return softmax(predict_logits(spec, teacher, x))


def local_max_loss(spec, params, teacher, forget_batch, plan: DivergencePlan):
    """``(loss, grads)`` of the max objective on one batch of forget images."""
    x = np.asarray(forget_batch, dtype=np.float64)
    if x.shape[0] == 0:
        raise ConfigurationError("forget batch is empty")
    obj = MaxLoss(spec, teacher_probs(spec, teacher, x), plan.forget_term)
    return obj(params, x, None, np.arange(x.shape[0]))


def local_min_loss(spec, params, teacher, retain_batch, labels, plan: DivergencePlan, alpha, gamma):
    """``(loss, grads)`` of the min objective on one labelled retain batch."""
    x = np.asarray(retain_batch, dtype=np.float64)
    if x.shape[0] == 0:
        raise ConfigurationError("retain batch is empty")
    obj = MinLoss(spec, teacher_probs(spec, teacher, x), plan, alpha, gamma)
    return obj(params, x, np.asarray(labels), np.arange(x.shape[0]))


@dataclass
class _Monitor:
    spec: ModelSpec
    test_set: LabeledDataset | None
    retain_set: LabeledDataset | None
    forget_set: LabeledDataset | None
    forget_metric: str

    def __call__(self, round_index, phase, params) -> dict:
        entry = {"round": round_index, "phase": phase, "retain_acc": None, "forget_metric": None, "test_acc": None}
        if self.retain_set is not None and len(self.retain_set):
            entry["retain_acc"] = accuracy(self.spec, params, self.retain_set)
        if self.forget_set is not None and len(self.forget_set):
            if self.forget_metric == "loss":
                entry["forget_metric"] = float(per_example_loss(self.spec, params, self.forget_set).mean())
            else:
                entry["forget_metric"] = accuracy(self.spec, params, self.forget_set)
        if self.test_set is not None:
            entry["test_acc"] = accuracy(self.spec, params, self.test_set)
        return entry


def _monitor(state, test_set, forget_metric):
    if forget_metric not in ("accuracy", "loss"):
        raise ConfigurationError("forget_metric must be 'accuracy' or 'loss'")
    retain = [c.retain_data() for c in state.clients if c.n_retain]
    forget = [c.forget_data() for c in state.clients if c.n_forget]
    return _Monitor(
        state.spec,
        test_set,
        LabeledDataset.concat(retain) if retain else None,
        LabeledDataset.concat(forget) if forget else None,
        forget_metric,
    )


def ffum_run(
    state: FederationState,
    cfg: FfumConfig,
    *,
    test_set: LabeledDataset | None = None,
    forget_metric: str = "accuracy",
    workers: int | None = None,
) -> UnlearnResult:
    """Unlearn every client's forget set from ``state.global_params``.

    ``state.global_params`` is the pretrained model; it is also the teacher
    for the whole run under ``teacher_policy="initial_model"``. Under
    ``"previous_round"`` round ``t`` uses the global model from round
    ``t - 1`` (the pretrained model for ``t = 0``) and post-training round
    ``tau`` uses the model it starts from.
    """
    clients = state.clients
    if not any(c.n_forget for c in clients):
        raise ConfigurationError("f-FUM needs at least one client with forget data")
    if not any(c.n_retain for c in clients):
        raise ConfigurationError("f-FUM needs at least one client with retain data")
    t_start = time.perf_counter()
    spec = state.spec
    theta0 = state.global_params
    monitor = _monitor(state, test_set, forget_metric)
    result = UnlearnResult(final_params=theta0)
    forget_sets = {c.client_id: c.forget_data() for c in clients}
    retain_sets = {c.client_id: c.retain_data() for c in clients}
    n_f = sum(len(d) for d in forget_sets.values())
    n_r = sum(len(d) for d in retain_sets.values())

    def cfg_for(lr, epochs):
        return RoundConfig(local_epochs=epochs, batch_size=cfg.batch_size, learning_rate=lr, shuffle_seed=cfg.seed)

    cache: dict = {}

    def probs_of(teacher: ParamVector, cid: int, which: str):
        # teacher outputs depend only on (teacher, client data); memoise per teacher
        key = (id(teacher), cid, which)
        if key not in cache:
            ds = forget_sets[cid] if which == "forget" else retain_sets[cid]
            cache[key] = teacher_probs(spec, teacher, ds.images)
        return cache[key]

    def max_phase(theta, teacher, t):
        rc = cfg_for(cfg.eta_max, cfg.epochs_max)
        active = [c.client_id for c in clients if len(forget_sets[c.client_id])]

        def work(cid):
            loss = MaxLoss(spec, probs_of(teacher, cid, "forget"), cfg.plan.forget_term)
            return local_sgd(spec, theta, forget_sets[cid], loss, rc, "ascent",
                             round_index=t, client_id=cid, stream="ffum-max")

        updates = run_clients(work, active, workers)
        weights = {cid: len(forget_sets[cid]) / n_f for cid in active}
        result.aggregation_log.append({"round": t, "phase": "max", "weights": weights})
        return aggregate([(u, weights[cid]) for u, cid in zip(updates, active)])

    def min_phase(theta, teacher, t, phase, epochs):
        rc = cfg_for(cfg.eta_min, epochs)
        active = [c.client_id for c in clients if len(retain_sets[c.client_id])]

        def work(cid):
            loss = MinLoss(spec, probs_of(teacher, cid, "retain"), cfg.plan, cfg.alpha, cfg.gamma)
            return local_sgd(spec, theta, retain_sets[cid], loss, rc, "descent",
                             round_index=t, client_id=cid, stream=f"ffum-{phase}")

        updates = run_clients(work, active, workers)
        weights = {cid: len(retain_sets[cid]) / n_r for cid in active}
        result.aggregation_log.append({"round": t, "phase": phase, "weights": weights})
        return aggregate([(u, weights[cid]) for u, cid in zip(updates, active)])

    history = [theta0]
    theta = theta0
    for t in range(cfg.rounds_R):
        if cfg.teacher_policy == "initial_model":
            teacher = theta0
        else:
            teacher = history[max(t - 1, 0)]
        half = max_phase(theta, teacher, t)
        result.per_round_metrics.append(monitor(t, "max", half))
        theta = min_phase(half, teacher, t, "min", cfg.epochs_min)
        result.per_round_metrics.append(monitor(t, "min", theta))
        history.append(theta)
    for tau in range(cfg.post_rounds):
        teacher = theta0 if cfg.teacher_policy == "initial_model" else theta
        theta = min_phase(theta, teacher, cfg.rounds_R + tau, "post", cfg.epochs_post)
        result.per_round_metrics.append(monitor(cfg.rounds_R + tau, "post", theta))
    result.final_params = theta
    result.comm_rounds_used = 2 * cfg.rounds_R + cfg.post_rounds
    result.wall_ms = round((time.perf_counter() - t_start) * 1000.0, 3)
    return result


def retain_datasets(clients):
    return [(c.client_id, c.retain_data()) for c in clients]


def retrain_oracle(shards, spec: ModelSpec, cfg: RoundConfig, rounds: int, init_seed: int,
                   *, workers: int | None = None) -> ParamVector:
    """Exact unlearning: FedAvg from a fresh init on retained data only."""
    datasets = retain_datasets(shards)
    if not any(len(ds) for _, ds in datasets):
        raise ConfigurationError("retrain oracle needs at least one client with retain data")
    state = FederationState(init_params(spec, init_seed), tuple(shards), spec)
    out, _ = fl_pretrain(state, rounds, cfg, datasets=datasets, workers=workers)
    return out.global_params


def _finetune(state, params, cfg: RoundConfig, rounds, result, first_round, monitor, workers):
    datasets = retain_datasets(state.clients)
    n_r = sum(len(ds) for _, ds in datasets)
    if n_r == 0:
        raise ConfigurationError("fine-tuning needs at least one client with retain data")
    for r in range(rounds):
        t = first_round + r
        params, _ = fedavg_round(state.spec, params, datasets, cfg, t, stream="finetune", workers=workers)
        result.aggregation_log.append({
            "round": t, "phase": "finetune",
            "weights": {cid: len(ds) / n_r for cid, ds in datasets if len(ds)},
        })
        result.per_round_metrics.append(monitor(t, "finetune", params))
    return params


def project_to_ball(center: ParamVector, radius: float):
    def project(p: ParamVector) -> ParamVector:
        dist = param_distance(p, center)
        if dist <= radius:
            return p
        return param_axpy(radius / dist, param_axpy(-1.0, center, p), center)

    return project


def baseline_halimi(
    state: FederationState,
    eta: float,
    epochs: int,
    radius_delta: float,
    finetune_rounds: int,
    finetune_cfg: RoundConfig,
    *,
    batch_size: int = 64,
    seed: int = 0,
    test_set: LabeledDataset | None = None,
    forget_metric: str = "accuracy",
    workers: int | None = None,
) -> UnlearnResult:
    """Projected gradient ascent on the forget data, then retain-only FedAvg.

    The ball is centred on the pretrained model with radius ``radius_delta``.
    Ascent results of several forgetting clients are averaged with weights
    ``n_f^(c) / n_f`` before fine-tuning starts from them.
    """
    if radius_delta < 0:
        raise ConfigurationError("radius_delta must be non-negative")
    forgetting = [c for c in state.clients if c.n_forget]
    if not forgetting:
        raise ConfigurationError("Halimi baseline needs at least one forgetting client")
    t_start = time.perf_counter()
    spec, theta0 = state.spec, state.global_params
    monitor = _monitor(state, test_set, forget_metric)
    result = UnlearnResult(final_params=theta0)
    ball = project_to_ball(theta0, radius_delta)
    rc = RoundConfig(local_epochs=epochs, batch_size=batch_size, learning_rate=eta, shuffle_seed=seed)
    loss = SupervisedLoss(spec)

    def work(client):
        dists = []

        def project(p):
            q = ball(p)
            dists.append(param_distance(q, theta0))
            return q

        out = local_sgd(spec, theta0, client.forget_data(), loss, rc, "ascent",
                        round_index=0, client_id=client.client_id, stream="halimi", project=project)
        return out, dists

    outs = run_clients(work, forgetting, workers)
    n_f = sum(c.n_forget for c in forgetting)
    weights = {c.client_id: c.n_forget / n_f for c in forgetting}
    for _, dists in outs:
        result.projection_distances.extend(dists)
    result.aggregation_log.append({"round": 0, "phase": "ascent", "weights": weights})
    params = aggregate([(o, weights[c.client_id]) for (o, _), c in zip(outs, forgetting)])
    result.per_round_metrics.append(monitor(0, "ascent", params))
    params = _finetune(state, params, finetune_cfg, finetune_rounds, result, 1, monitor, workers)
    result.final_params = params
    result.comm_rounds_used = 1 + finetune_rounds
    result.wall_ms = round((time.perf_counter() - t_start) * 1000.0, 3)
    return result


def negate_first_layer(params: ParamVector) -> ParamVector:
    name = "dense0.weight"
    return params.replace_segment(name, -params.segment(name))


def baseline_not(
    state: FederationState,
    finetune_rounds: int,
    finetune_cfg: RoundConfig,
    *,
    test_set: LabeledDataset | None = None,
    forget_metric: str = "accuracy",
    workers: int | None = None,
) -> UnlearnResult:
    """Negate the first linear layer's weights, then retain-only FedAvg."""
    t_start = time.perf_counter()
    monitor = _monitor(state, test_set, forget_metric)
    params = negate_first_layer(state.global_params)
    result = UnlearnResult(final_params=params)
    result.per_round_metrics.append(monitor(0, "negate", params))
    params = _finetune(state, params, finetune_cfg, finetune_rounds, result, 0, monitor, workers)
    result.final_params = params
    result.comm_rounds_used = finetune_rounds
    result.wall_ms = round((time.perf_counter() - t_start) * 1000.0, 3)
    return result


def default_halimi_radius(pretrain_log: list[dict]) -> float:
    """A third of the mean pairwise client-update distance in the last round."""
    if not pretrain_log:
        raise ConfigurationError("cannot derive a Halimi radius without a pretraining log")
    return pretrain_log[-1]["client_spread"] / 3.0


__all__ = [
    "FfumConfig", "UnlearnResult", "ffum_run", "local_max_loss", "local_min_loss",
    "retrain_oracle", "baseline_halimi", "baseline_not", "negate_first_layer",
    "default_halimi_radius", "project_to_ball", "MaxLoss", "MinLoss",
]
