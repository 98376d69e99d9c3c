"""Pretrain, unlearn, evaluate and report one experiment or a sweep of them.

All randomness is derived from ``config.seed`` through :func:`derive_seed`,
keyed by purpose (and by method label for unlearning runs), so a method's
result does not depend on which other methods share the config.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

from .config import ExperimentConfig, MethodConfig, config_hash, config_to_dict, dump_config
from .data import LabeledDataset, build_scenario, load_idx, synth_blobs
from .errors import ConfigurationError
from .evaluation import MetricReport, metric_report, ordering_checks
from .federation import FederationState, RoundConfig, fl_pretrain
from .io_utils import atomic_write_json, atomic_write_text, csv_text
from .models import init_params, save_checkpoint
from .seeding import derive_seed
from .unlearning import (
    baseline_halimi,
    baseline_not,
    default_halimi_radius,
    ffum_run,
    retrain_oracle,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ["method", *MetricReport.CSV_FIELDS, "comm_rounds"]
CURVES_HEADER = ["method", "round", "phase", "test_acc", "retain_acc", "forget_metric"]
SWEEP_HEADER = ["method", "N", "removed_pct", "pretrain_acc", "unlearn_acc", "mia", "status"]


class PhaseError(Exception):
    """Wraps a failure with the phase (``pretrain`` or a method label) it happened in."""

    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"{phase}: {cause}")
        self.phase = phase
        self.cause = cause


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.dataset
    if d.kind == "synthetic":
        return synth_blobs(d.num_classes, d.per_class, d.dim, d.spread,
                           seed=derive_seed(cfg.seed, "data"), noise=d.noise)
    ds = load_idx(d.images, d.labels, limit=d.limit, downsample_to=d.downsample_to, num_classes=d.num_classes)
    if ds.dim != cfg.model.input_dim:
        raise ConfigurationError(f"model.input_dim is {cfg.model.input_dim} but the IDX images have {ds.dim} pixels")
    return ds


@dataclasses.dataclass
class Setup:
    """Everything shared by the methods of one experiment."""

    cfg: ExperimentConfig
    state: FederationState  # pretrained
    test: LabeledDataset
    retain: LabeledDataset
    forget: LabeledDataset
    pretrain_cfg: RoundConfig
    pretrain_log: list
    init_seed: int


def prepare(cfg: ExperimentConfig, workers=None) -> Setup:
    base = load_dataset(cfg)
    scenario = dataclasses.replace(cfg.scenario, seed=derive_seed(cfg.seed, "scenario"))
    shards, test = build_scenario(base, scenario, cfg.corruption)
    spec = cfg.model
    init_seed = derive_seed(cfg.seed, "init")
    p = cfg.pretrain
    rc = RoundConfig(p.local_epochs, p.batch_size, p.learning_rate, shuffle_seed=derive_seed(cfg.seed, "pretrain"))
    state = FederationState(init_params(spec, init_seed), tuple(shards), spec)
    try:
        state, plog = fl_pretrain(state, p.rounds, rc, test_set=test, workers=workers)
    except FloatingPointError as exc:
        raise PhaseError("pretrain", exc) from exc
    retain = [c.retain_data() for c in shards if c.n_retain]
    forget = [c.forget_data() for c in shards if c.n_forget]
    if not retain or not forget:
        raise ConfigurationError("scenario must leave both forget and retain data")
    return Setup(cfg, state, test, LabeledDataset.concat(retain), LabeledDataset.concat(forget), rc, plog, init_seed)


def evaluate(setup: Setup, params) -> MetricReport:
    cfg = setup.cfg
    return metric_report(cfg.model, params, test_set=setup.test, retain_set=setup.retain, forget_set=setup.forget,
                         corruption=cfg.corruption, mia=cfg.eval.mia, mia_seed=cfg.eval.mia_seed)


def run_method(setup: Setup, method: MethodConfig, workers=None):
    """Returns ``(final_params, UnlearnResult or None)``."""
    cfg, state = setup.cfg, setup.state
    seed = derive_seed(cfg.seed, f"method:{method.label}")
    fm = cfg.eval.forget_metric
    if method.kind == "retrain_oracle":
        return retrain_oracle(state.clients, cfg.model, setup.pretrain_cfg, cfg.pretrain.rounds,
                              setup.init_seed, workers=workers), None
    if method.kind == "ffum":
        res = ffum_run(state, method.ffum_config(seed), test_set=setup.test, forget_metric=fm, workers=workers)
        return res.final_params, res
    ft = RoundConfig(
        local_epochs=method.finetune_epochs or cfg.pretrain.local_epochs,
        batch_size=method.batch_size,
        learning_rate=cfg.pretrain.learning_rate if method.finetune_lr is None else method.finetune_lr,
        shuffle_seed=seed,
    )
    if method.kind == "halimi":
        radius = method.radius_delta
        if radius is None:
            radius = default_halimi_radius(setup.pretrain_log)
        res = baseline_halimi(state, method.eta, method.epochs, radius, method.finetune_rounds, ft,
                              batch_size=method.batch_size, seed=seed, test_set=setup.test,
                              forget_metric=fm, workers=workers)
    else:
        res = baseline_not(state, method.finetune_rounds, ft, test_set=setup.test, forget_metric=fm, workers=workers)
    return res.final_params, res


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def run_experiment(cfg: ExperimentConfig, out_dir, workers=None) -> dict:
    """Run every configured method and write the report files into ``out_dir``.

    Returns the report dict. Raises :class:`PhaseError` for numeric failures.
    """
    out = Path(out_dir)
    timings = {}
    t0 = time.perf_counter()
    setup = prepare(cfg, workers)
    timings["pretrain"] = round((time.perf_counter() - t0) * 1000.0, 3)
    atomic_write_text(out / "pretrain_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in setup.pretrain_log))
    save_checkpoint(out / "checkpoints" / "pretrained.ffum", setup.state.global_params)

    pre_report = evaluate(setup, setup.state.global_params)
    results = {}
    # the oracle goes first so every other method can be compared with it
    ordered = sorted(cfg.methods, key=lambda m: m.kind != "retrain_oracle")
    for method in ordered:
        label = method.label
        t0 = time.perf_counter()
        try:
            params, res = run_method(setup, method, workers)
        except FloatingPointError as exc:
            raise PhaseError(label, exc) from exc
        timings[label] = round((time.perf_counter() - t0) * 1000.0, 3)
        save_checkpoint(out / "checkpoints" / f"{label}.ffum", params)
        results[label] = (method, evaluate(setup, params), res)

    oracle = next((r for m, r, _ in results.values() if m.kind == "retrain_oracle"), None)
    for label, (method, rep, _) in results.items():
        if method.kind != "retrain_oracle":
            rep.orderings = ordering_checks(pre_report, rep, oracle, cfg.scenario_kind,
                                            tau_eq=cfg.eval.tau_eq, tau_mia=cfg.eval.tau_mia)

    rows = [["pretrained", *pre_report.csv_values(), ""]]
    curves = [["pretrain", r["round"], "pretrain", _fmt(r["global_test_acc"]), "", ""] for r in setup.pretrain_log]
    for method in cfg.methods:
        _, rep, res = results[method.label]
        rows.append([method.label, *rep.csv_values(), "" if res is None else str(res.comm_rounds_used)])
        if res is not None:
            for m in res.per_round_metrics:
                curves.append([method.label, m["round"], m["phase"], _fmt(m["test_acc"]),
                               _fmt(m["retain_acc"]), _fmt(m["forget_metric"])])
    atomic_write_text(out / "metrics.csv", csv_text(METRICS_HEADER, rows))
    atomic_write_text(out / "curves.csv", csv_text(CURVES_HEADER, curves))

    report = {
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "scenario_kind": cfg.scenario_kind,
        "counts": {
            "train": len(setup.retain) + len(setup.forget), "retain": len(setup.retain),
            "forget": len(setup.forget), "test": len(setup.test),
        },
        "pretrained": pre_report.to_dict(),
        "methods": {
            m.label: {
                "kind": m.kind,
                "metrics": results[m.label][1].to_dict(),
                "summary": None if results[m.label][2] is None else results[m.label][2].summary(),
            }
            for m in cfg.methods
        },
        "wall_ms": timings,
    }
    atomic_write_text(out / "config.json", dump_config(cfg))
    atomic_write_json(out / "report.json", report)
    return report


def mandatory_failures(report: dict) -> list[str]:
    """Failed ordering checks of f-FUM methods (baseline checks are informational)."""
    bad = []
    for label, entry in report["methods"].items():
        if entry["kind"] != "ffum":
            continue
        for check, res in entry["metrics"]["orderings"].items():
            if res["status"] == "fail":
                bad.append(f"{label}: {check} (margin {res['margin']})")
    return bad


SWEEP_AXES = ("method", "forget_fraction", "num_clients")


def method_from_label(label: str, template: ExperimentConfig) -> MethodConfig:
    """A configured method with this label, or a default one built from it."""
    for m in template.methods:
        if m.label == label:
            return m
    if label.startswith("ffum-"):
        base = next((m for m in template.methods if m.kind == "ffum"), MethodConfig())
        return dataclasses.replace(base, name=None, plan=label[len("ffum-"):])
    if label in ("halimi", "not", "retrain_oracle"):
        return MethodConfig(kind=label)
    raise ConfigurationError(f"unknown method {label!r} for the method axis")


def parse_axis_values(axis: str, raw: list[str], template: ExperimentConfig) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = [v.strip() for v in raw if v.strip()]
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    try:
        if axis == "method":
            return [method_from_label(v, template) for v in values]
        if axis == "forget_fraction":
            return [float(v) for v in values]
        return [int(v) for v in values]
    except ValueError:
        raise ConfigurationError(f"values for axis {axis!r} must be numbers, got {raw}") from None


def _grid_point(cfg: ExperimentConfig, axis: str, value):
    s = cfg.scenario
    if axis == "forget_fraction":
        if s.level == "client":
            raise ConfigurationError("forget_fraction sweeps need a data-level scenario")
        return dataclasses.replace(cfg, scenario=dataclasses.replace(s, forget_fraction=value))
    if axis == "num_clients":
        targets = tuple(c for c in s.target_clients if c < value) or (0,)
        return dataclasses.replace(cfg, scenario=dataclasses.replace(s, num_clients=value, target_clients=targets))
    return cfg


def sweep(cfg: ExperimentConfig, axis: str, values: list, out_path, workers=None) -> tuple[list, int]:
    """Run a grid along ``axis`` and write one aggregate CSV, rewritten after every point.

    The method axis is a single grid point (all methods share one pretrained
    model). Other axes give each value its own derived seed and run every
    configured method. Returns ``(rows, n_failed_points)``.
    """
    rows, failures = [], 0
    if axis == "method":
        points = [(cfg, list(values))]
    else:
        points = [
            (_grid_point(cfg, axis, v).with_seed(derive_seed(cfg.seed, f"sweep:{axis}", i)), list(cfg.methods))
            for i, v in enumerate(values)
        ]
    for point, methods in points:
        n_clients = point.scenario.num_clients
        try:
            setup = prepare(point, workers)
            pre = evaluate(setup, setup.state.global_params)
        except (ConfigurationError, PhaseError, FloatingPointError) as exc:
            failures += 1
            for m in methods:
                rows.append([m.label, n_clients, "", "", "", "", f"error: {exc}"])
            atomic_write_text(out_path, csv_text(SWEEP_HEADER, rows))
            continue
        n_train = len(setup.retain) + len(setup.forget)
        if point.scenario.level == "data":
            removed = 100.0 * point.scenario.forget_fraction
        else:
            removed = 100.0 * len(setup.forget) / n_train
        for m in methods:
            try:
                params, _ = run_method(setup, m, workers)
                rep = evaluate(setup, params)
                mia = rep.mia_score
                rows.append([m.label, n_clients, f"{removed:g}", _fmt(pre.test_acc), _fmt(rep.test_acc), _fmt(mia), "ok"])
            except (FloatingPointError, ConfigurationError) as exc:
                failures += 1
                rows.append([m.label, n_clients, f"{removed:g}", _fmt(pre.test_acc), "", "", f"error: {exc}"])
            atomic_write_text(out_path, csv_text(SWEEP_HEADER, rows))
    return rows, failures
