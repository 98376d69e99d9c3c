"""Simulated FedAvg: broadcast, independent local SGD, weighted aggregation.

Local updates never share mutable state and draw their batch order from a
stream keyed by ``(shuffle_seed, stream, round, client_id)``, so running the
clients sequentially or on a thread pool produces identical aggregates.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import ClientShard, LabeledDataset
from .divergences import DivergenceKind, supervised_rows
from .errors import ConfigurationError, NonFiniteError, ProtocolError
from .models import ModelSpec, ParamVector, loss_and_grad, param_distance
from .seeding import rng_for

log = logging.getLogger(__name__)

# (params, x, y, rows) -> (loss, gradient); ``rows`` index the local dataset
LossFn = Callable[[ParamVector, np.ndarray, np.ndarray, np.ndarray], tuple]


@dataclass(frozen=True)
class RoundConfig:
    local_epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 0.1
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")


@dataclass(frozen=True, eq=False)
class FederationState:
    global_params: ParamVector
    clients: tuple[ClientShard, ...]
    spec: ModelSpec
    round_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))


class SupervisedLoss:
    """Mean ``D_f(onehot(y) || softmax(logits))`` over a batch."""

    def __init__(self, spec: ModelSpec, kind=DivergenceKind.KL):
        self.spec = spec
        self.kind = DivergenceKind.parse(kind)

    def __call__(self, params, x, y, rows=None):
        def head(logits):
            losses, grad = supervised_rows(logits, y, self.kind)
            n = losses.shape[0]
            return losses.mean(), grad / n

        return loss_and_grad(self.spec, params, x, head)


def default_workers() -> int:
    raw = os.environ.get("FFUM_THREADS", "")
    if raw.strip():
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigurationError(f"FFUM_THREADS must be an integer, got {raw!r}") from None
    return 1


def local_sgd(
    spec: ModelSpec,
    start: ParamVector,
    data: LabeledDataset,
    loss: LossFn,
    cfg: RoundConfig,
    direction: str = "descent",
    *,
    round_index: int = 0,
    client_id: int = 0,
    stream: str = "local",
    project: Callable[[ParamVector], ParamVector] | None = None,
) -> ParamVector | None:
    """Run ``cfg.local_epochs`` epochs of mini-batch gradient steps from ``start``.

    ``direction="ascent"`` flips the step sign. ``project`` (if given) is
    applied after every step. Returns ``None`` when ``data`` is empty so the
    caller can drop this client from the aggregate.
    """
    if direction not in ("descent", "ascent"):
        raise ConfigurationError(f"direction must be 'descent' or 'ascent', got {direction!r}")
    n = len(data)
    if n == 0:
        return None
    sign = -1.0 if direction == "descent" else 1.0
    step = sign * cfg.learning_rate
    rng = rng_for(cfg.shuffle_seed, stream, round_index, client_id)
    theta = start.values.copy()
    layout = start.layout
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            params = ParamVector(layout, theta)
            try:
                _, grad = loss(params, data.images[rows], data.labels[rows], rows)
            except NonFiniteError as exc:
                raise NonFiniteError(f"client {client_id}, round {round_index}: {exc}") from exc
            theta = theta + step * grad.values
            if project is not None:
                theta = project(ParamVector(layout, theta)).values.copy()
    if not np.all(np.isfinite(theta)):
        raise NonFiniteError(f"local update of client {client_id} diverged in round {round_index}")
    return ParamVector(layout, theta)


def aggregate(updates: Sequence[tuple[ParamVector, float]]) -> ParamVector:
    """Weighted mean of parameter vectors, weights normalised to sum to one.

    Computed as ``ref + sum_c w_c (theta_c - ref)`` with ``ref`` the first
    contributing vector, so averaging identical vectors returns them exactly.
    """
    contrib = [(p, float(w)) for p, w in updates if w > 0]
    if any(w < 0 for _, w in updates):
        raise ProtocolError("aggregation weights must be non-negative")
    if not contrib:
        raise ProtocolError("no contributing clients")
    total = sum(w for _, w in contrib)
    ref = contrib[0][0]
    acc = np.zeros_like(ref.values)
    for p, w in contrib:
        if p.layout != ref.layout:
            raise ProtocolError("aggregated vectors come from different model specs")
        acc += (w / total) * (p.values - ref.values)
    return ParamVector(ref.layout, ref.values + acc)


def run_clients(fn, items, workers: int | None = None) -> list:
    """Map ``fn`` over ``items`` preserving order, on up to ``workers`` threads."""
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def evaluate_accuracy(spec, params, ds) -> float:
    from .evaluation import accuracy

    return accuracy(spec, params, ds)


def fedavg_round(
    spec: ModelSpec,
    global_params: ParamVector,
    datasets: Sequence[tuple[int, LabeledDataset]],
    cfg: RoundConfig,
    round_index: int,
    *,
    loss_kind=DivergenceKind.KL,
    stream: str = "pretrain",
    workers: int | None = None,
):
    """One broadcast / local-train / aggregate exchange on supervised loss.

    ``datasets`` pairs each client id with the data it trains on; clients with
    empty data get weight zero. Returns ``(new_params, client_updates)``.
    """
    loss = SupervisedLoss(spec, loss_kind)

    def work(item):
        cid, ds = item
        return local_sgd(spec, global_params, ds, loss, cfg, "descent",
                         round_index=round_index, client_id=cid, stream=stream)

    updates = run_clients(work, list(datasets), workers)
    pairs = [(u, len(ds)) for u, (_, ds) in zip(updates, datasets) if u is not None]
    return aggregate(pairs), updates


def mean_pairwise_distance(vectors: Sequence[ParamVector]) -> float:
    vecs = [v for v in vectors if v is not None]
    dists = [param_distance(a, b) for i, a in enumerate(vecs) for b in vecs[i + 1:]]
    return float(np.mean(dists)) if dists else 0.0


def fl_pretrain(
    state: FederationState,
    rounds: int,
    cfg: RoundConfig,
    *,
    test_set: LabeledDataset | None = None,
    workers: int | None = None,
    datasets: Sequence[tuple[int, LabeledDataset]] | None = None,
    phase: str = "pretrain",
):
    """FedAvg with weights ``n_c / n`` for ``rounds`` rounds.

    Every client trains on its whole shard, corrupted examples included,
    unless ``datasets`` overrides what each client trains on. Returns
    ``(new_state, log)``; each log entry is a JSON-ready dict with keys
    ``round, phase, global_test_acc, wall_ms, client_spread``.
    """
    if rounds < 0:
        raise ConfigurationError("pretraining rounds must be non-negative")
    if datasets is None:
        datasets = [(c.client_id, c.data) for c in state.clients]
    params = state.global_params
    records = []
    for r in range(rounds):
        t0 = time.perf_counter()
        round_index = state.round_index + r
        params, updates = fedavg_round(state.spec, params, datasets, cfg, round_index,
                                       stream=phase, workers=workers)
        acc = evaluate_accuracy(state.spec, params, test_set) if test_set is not None else None
        records.append({
            "round": round_index,
            "phase": phase,
            "global_test_acc": acc,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            "client_spread": mean_pairwise_distance(updates),
        })
        log.debug("%s round %d test_acc=%s", phase, round_index, acc)
    return replace(state, global_params=params, round_index=state.round_index + rounds), records
