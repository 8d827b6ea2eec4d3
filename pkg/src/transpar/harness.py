"""Experiment orchestration: ratio estimation, training runs, ablation suites."""

from __future__ import annotations

import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import cycle
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .data import DomainDataset, ShiftScenario, Standardizer, batches, generate, standardize
from .discrepancy import FEATURE_SOURCES, TransferRatioEstimate, estimate_transfer_ratio, train_probe, proxy_a_distance
from .errors import ConfigurationError, NumericFailure
from .model import ROLES, ModuleRole, NetConfig, Network, features, forward_uda, init_network, predict, store_gradients
from .optim import CRITERIA, MODES, TransParOptimizer, UpdateConfig, sgd_step

log = logging.getLogger(__name__)

METHODS = ("source_only", "dann", "transpar_dann")

# seed-stream tags, combined with the run seed
_SHUFFLE_SOURCE, _SHUFFLE_TARGET = 11, 12


@dataclass(frozen=True)
class TrainConfig:
    scenario: ShiftScenario = field(default_factory=ShiftScenario)
    seed: int = 0
    hidden: int = 64
    disc_hidden: int = 16
    method: str = "transpar_dann"
    lr: float = 0.01
    weight_decay: float = 0.002
    alpha: float = 0.1
    beta: float = 1.0
    batch_size: int = 64
    epochs: int = 30
    probe_epochs: int = 10
    probe_lr: float = 0.01
    min_ratio: float = 0.1
    criterion: str = "both"
    mode: str = "iterative"
    scope: tuple[str, ...] = ("FE", "SH", "DD")
    entropy_enabled: bool = True
    feature_source: str = "frozen_init"
    dd_adversarial: bool = True
    tau_override: float | None = None
    grid: str = "ablation"

    def validate(self) -> "TrainConfig":
        self.scenario.validate()
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.criterion not in CRITERIA or self.mode not in MODES:
            raise ConfigurationError(f"bad criterion/mode {self.criterion!r}/{self.mode!r}")
        if self.method == "transpar_dann" and not self.scope:
            raise ConfigurationError("scope must be nonempty when TransPar is active")
        for code in self.scope:
            ModuleRole.parse(code)
        if self.feature_source not in FEATURE_SOURCES:
            raise ConfigurationError(f"unknown feature_source {self.feature_source!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.probe_epochs < 0:
            raise ConfigurationError("batch_size >= 1, epochs >= 0 and probe_epochs >= 0 required")
        if self.beta < 0 or self.alpha < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if self.tau_override is not None and not 0.0 < self.tau_override <= 1.0:
            raise ConfigurationError("tau_override must lie in (0, 1]")
        if self.grid not in ("ablation", "full"):
            raise ConfigurationError(f"grid must be 'ablation' or 'full', got {self.grid!r}")
        UpdateConfig(self.lr, self.weight_decay, self.criterion, self.mode).validate()
        return self

    @property
    def net_config(self) -> NetConfig:
        return NetConfig(input_dim=2, hidden=self.hidden, n_classes=2, disc_hidden=self.disc_hidden)

    @property
    def update_config(self) -> UpdateConfig:
        return UpdateConfig(self.lr, self.weight_decay, self.criterion, self.mode)

    @property
    def entropy_weight(self) -> float:
        """Entropy term weight actually used: only TransPar runs with entropy enabled."""
        if self.method == "transpar_dann" and self.entropy_enabled:
            return self.alpha
        return 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scenario"] = self.scenario.to_dict()
        out["scope"] = list(self.scope)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        kw = dict(raw)
        if "scenario" in kw:
            kw["scenario"] = ShiftScenario.from_dict(kw["scenario"])
        if "scope" in kw:
            kw["scope"] = tuple(kw["scope"])
        if "method" in kw:
            kw["method"] = kw["method"].replace("-", "_")
        try:
            return cls(**kw).validate()
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)


class Datasets(NamedTuple):
    source_train: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset
    target_test: DomainDataset
    scaler: Standardizer


def prepare_data(config: TrainConfig) -> Datasets:
    (s_tr, s_te), (t_tr, t_te) = generate(config.scenario, config.seed)
    (s_tr, s_te, t_tr, t_te), scaler = standardize(s_tr, s_te, t_tr, t_te)
    return Datasets(s_tr, s_te, t_tr, t_te, scaler)


def run_stage1(config: TrainConfig, data: Datasets | None = None, out_path=None,
               probe_seed: int | None = None) -> TransferRatioEstimate:
    """Estimate the transfer ratio from the untrained stage-2 network's features."""
    config.validate()
    data = data or prepare_data(config)
    net_init = init_network(config.net_config, config.seed)
    est = estimate_transfer_ratio(
        net_init, data.source_train.x, data.target_train.x,
        epochs=config.probe_epochs, seed=config.seed if probe_seed is None else probe_seed,
        min_ratio=config.min_ratio, lr=config.probe_lr, feature_source=config.feature_source,
    )
    if out_path is not None:
        est.save(out_path)
    return est


def evaluate(net: Network, dataset: DomainDataset) -> float:
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, dataset.x) == dataset.labels))


@dataclass
class MetricsRow:
    run_id: str
    epoch: int
    loss_src: float
    loss_ent: float
    loss_dom: float
    acc_src: float
    acc_tgt: float
    tau: float | None
    m_f: int
    m_f_t: int
    m_c: int
    m_c_t: int
    m_d: int
    m_d_t: int
    decay_norm_f: float
    decay_norm_c: float
    decay_norm_d: float


METRICS_COLUMNS = [f.name for f in fields(MetricsRow)]


class TrainResult(NamedTuple):
    net: Network
    rows: list
    label_reads: int
    ratio: TransferRatioEstimate | None


def _pairs(src_batches, tgt_batches):
    """Advance both streams in lockstep; the shorter one restarts within the epoch."""
    n = max(len(src_batches), len(tgt_batches))
    s_it, t_it = cycle(src_batches), cycle(tgt_batches)
    for _ in range(n):
        yield next(s_it), next(t_it)


def run_stage2(config: TrainConfig, ratio: TransferRatioEstimate | None = None,
               data: Datasets | None = None, run_id: str = "run",
               on_step: Callable | None = None) -> TrainResult:
    """Train one network; returns the final net and one metrics row per epoch.

    ``on_step(iteration, net, mask)`` is called after every update when given;
    ``mask`` is ``None`` for baseline methods. Numeric failures propagate as
    :class:`NumericFailure` carrying the rows recorded so far.
    """
    config.validate()
    transpar = config.method == "transpar_dann"
    if transpar and ratio is None and config.tau_override is None:
        raise ConfigurationError("transpar_dann needs a transfer ratio estimate")
    data = data or prepare_data(config)
    guard_before = data.target_train.label_reads
    net = init_network(config.net_config, config.seed)
    tau = None
    opt = None
    if transpar:
        tau = config.tau_override if config.tau_override is not None else ratio.tau
        opt = TransParOptimizer(net, tau, config.update_config,
                                scope=[ModuleRole.parse(c) for c in config.scope],
                                adversarial=config.dd_adversarial)
    use_domain = config.method != "source_only"
    alpha = config.entropy_weight
    counts = {role: net.count(role) for role in ROLES}
    rows: list[MetricsRow] = []
    iteration = 0
    try:
        for epoch in range(1, config.epochs + 1):
            src_b = list(batches(data.source_train, config.batch_size, [config.seed, _SHUFFLE_SOURCE, epoch]))
            tgt_b = list(batches(data.target_train, config.batch_size, [config.seed, _SHUFFLE_TARGET, epoch]))
            totals = np.zeros(3)
            n_iter = 0
            for (xs, ys, _), (xt, _, _) in _pairs(src_b, tgt_b):
                out = forward_uda(net, xs, ys, xt, beta=config.beta, alpha=alpha, domain_loss=use_domain)
                store_gradients(net, out)
                mask = None
                if opt is not None:
                    mask = opt.step()
                else:
                    sgd_step(net, config.lr, config.weight_decay)
                if on_step is not None:
                    on_step(iteration, net, mask)
                totals += out.losses
                n_iter += 1
                iteration += 1
            if opt is not None and epoch == config.epochs:
                opt.finalize()
            rows.append(_metrics_row(run_id, epoch, totals / max(n_iter, 1), net, data, tau, opt, counts))
    except NumericFailure as exc:
        raise NumericFailure(str(exc), rows) from exc
    reads = data.target_train.label_reads - guard_before
    if reads:
        raise AssertionError(f"target training labels were read {reads} times during training")
    return TrainResult(net, rows, reads, ratio)


def _metrics_row(run_id, epoch, losses, net, data, tau, opt, counts) -> MetricsRow:
    F, C, D = ROLES
    if opt is not None and opt.last_mask is not None:
        mt = {role: opt.last_mask.counts[role][1] for role in ROLES}
        decay = opt.untransferable_mean_abs()
    else:
        mt = dict(counts)
        decay = {role: 0.0 for role in ROLES}
    return MetricsRow(
        run_id, epoch, float(losses[0]), float(losses[1]), float(losses[2]),
        evaluate(net, data.source_test), evaluate(net, data.target_test), tau,
        counts[F], mt[F], counts[C], mt[C], counts[D], mt[D],
        decay[F], decay[C], decay[D],
    )


def adapted_distance(net: Network, data: Datasets, config: TrainConfig, probe_seed: int) -> float:
    """Proxy A-distance measured with a fresh probe on the trained extractor's features."""
    fs = features(net, data.source_train.x)
    ft = features(net, data.target_train.x)
    _, err = train_probe(fs, ft, epochs=config.probe_epochs, seed=probe_seed, lr=config.probe_lr)
    return proxy_a_distance(err)


# ---------------------------------------------------------------- suites

SCOPE_CELLS = {
    "FE": (("FE",), True),
    "SH": (("SH",), True),
    "DD": (("DD",), True),
    "FE+SH": (("FE", "SH"), True),
    "FE+DD": (("FE", "DD"), True),
    "FE+SH-entropy": (("FE", "SH"), False),
    "FE+SH+DD": (("FE", "SH", "DD"), True),
}
FULL_CELL = "transpar_dann/scope=FE+SH+DD/mode=iterative/criterion=both"


def _cell_id(method, scope="FE+SH+DD", mode="iterative", criterion="both"):
    if method != "transpar_dann":
        return method
    return f"transpar_dann/scope={scope}/mode={mode}/criterion={criterion}"


def suite_cells(grid: str = "ablation") -> dict[str, dict]:
    """Cell id -> config overrides.

    ``ablation`` varies one factor at a time around the full method (the
    scope table and the update-rule table); ``full`` takes the Cartesian
    product of scope, mode and criterion.
    """
    cells = {"source_only": {"method": "source_only"}, "dann": {"method": "dann"}}

    def add(scope_name, mode, criterion):
        scope, entropy = SCOPE_CELLS[scope_name]
        cells[_cell_id("transpar_dann", scope_name, mode, criterion)] = {
            "method": "transpar_dann", "scope": scope, "entropy_enabled": entropy,
            "mode": mode, "criterion": criterion,
        }

    if grid == "full":
        for scope_name in SCOPE_CELLS:
            for mode in MODES:
                for criterion in CRITERIA:
                    add(scope_name, mode, criterion)
        return cells
    for scope_name in SCOPE_CELLS:
        add(scope_name, "iterative", "both")
    for mode in MODES[1:]:
        add("FE+SH+DD", mode, "both")
    for criterion in CRITERIA[1:]:
        add("FE+SH+DD", "iterative", criterion)
    return cells


@dataclass
class RunRecord:
    cell: str
    seed: int
    status: str
    target_acc: float | None = None
    source_acc: float | None = None
    d_A_adapted: float | None = None
    error: str | None = None


@dataclass
class SuiteReport:
    config: dict
    seeds: list
    cells: list
    runs: list = field(default_factory=list)
    ratios: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)

    def cell_runs(self, cell: str) -> list[RunRecord]:
        return [r for r in self.runs if r.cell == cell]

    def median_target_acc(self, cell: str) -> float | None:
        vals = [r.target_acc for r in self.cell_runs(cell) if r.status == "ok"]
        return statistics.median(vals) if vals else None

    def median_adapted_distance(self, cell: str) -> float | None:
        vals = [r.d_A_adapted for r in self.cell_runs(cell) if r.status == "ok"]
        return statistics.median(vals) if vals else None

    def median_frozen_distance(self) -> float | None:
        vals = [r["d_A"] for r in self.ratios.values() if r is not None]
        return statistics.median(vals) if vals else None

    def complete(self) -> bool:
        have = {(r.cell, r.seed) for r in self.runs}
        return all((c, s) in have for c in self.cells for s in self.seeds)

    def aggregates(self) -> dict:
        cells = {}
        for cell in self.cells:
            runs = self.cell_runs(cell)
            cells[cell] = {
                "median_target_acc": self.median_target_acc(cell),
                "median_d_A_adapted": self.median_adapted_distance(cell),
                "n_ok": sum(r.status == "ok" for r in runs),
                "n_failed": sum(r.status != "ok" for r in runs),
            }
        return {
            "config": self.config,
            "seeds": self.seeds,
            "cells": cells,
            "median_d_A_frozen_init": self.median_frozen_distance(),
            "ratios": {str(k): v for k, v in sorted(self.ratios.items())},
            "runs": [asdict(r) for r in self.runs],
        }


def _run_seed(config: TrainConfig, seed: int, cells: dict):
    cfg = replace(config, seed=seed)
    data = prepare_data(cfg)
    runs, metrics = [], []
    try:
        ratio = run_stage1(cfg, data)
    except NumericFailure as exc:
        log.warning("seed %d: stage 1 failed: %s", seed, exc)
        ratio = None
    for cell, overrides in cells.items():
        run_id = f"{cell}@seed={seed}"
        cell_cfg = replace(cfg, **overrides)
        try:
            if cell_cfg.method == "transpar_dann" and ratio is None and cell_cfg.tau_override is None:
                raise NumericFailure("no transfer ratio for this seed")
            result = run_stage2(cell_cfg, ratio, data, run_id=run_id)
        except (NumericFailure, ConfigurationError) as exc:
            rows = getattr(exc, "rows", [])
            metrics.extend(rows)
            runs.append(RunRecord(cell, seed, "failed", error=f"{type(exc).__name__}: {exc}"))
            continue
        metrics.extend(result.rows)
        d_a = adapted_distance(result.net, data, cfg, probe_seed=seed)
        runs.append(RunRecord(cell, seed, "ok", evaluate(result.net, data.target_test),
                              evaluate(result.net, data.source_test), d_a))
    return seed, (ratio.to_dict() if ratio is not None else None), runs, metrics


def run_suite(config: TrainConfig, seeds, jobs: int = 1, cells: dict | None = None) -> SuiteReport:
    """Run every suite cell for every seed; stage 1 runs once per seed and is shared."""
    config.validate()
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ConfigurationError("a suite needs at least two seeds")
    cells = cells if cells is not None else suite_cells(config.grid)
    report = SuiteReport(config.to_dict(), seeds, list(cells))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_seed, [config] * len(seeds), seeds, [cells] * len(seeds)))
    else:
        results = [_run_seed(config, s, cells) for s in seeds]
    order = {c: i for i, c in enumerate(cells)}
    for seed, ratio, runs, metrics in results:
        report.ratios[seed] = ratio
        report.runs.extend(runs)
        report.metrics.extend(metrics)
    report.runs.sort(key=lambda r: (order[r.cell], r.seed))
    report.metrics.sort(key=lambda m: (order[m.run_id.rsplit("@", 1)[0]], seeds.index(int(m.run_id.rsplit("=", 1)[1])), m.epoch))
    return report
