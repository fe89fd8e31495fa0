"""Compression sweeps, toy iterative magnitude pruning and pass accounting.

Configs are JSON objects whose keys mirror :class:`ExperimentConfig`::

    {
      "network": "toy-vgg",                      # name, {"name": ..., **kwargs} or a full spec dict
      "scorers": [{"kind": "synflow"},
                  {"kind": "snip", "n": 100, "label": "snip-iterative"}],
      "grid": null, "grid_step": 0.25,           # null grid -> 10^{0, step, ...} plus rho_max
      "schedule": "exponential",
      "dataset": {"classes": 10, "samples": 1000, "separation": 3.0, "test_fraction": 0.25},
      "hyperparams": {"epochs": 10, "lr": 0.05, "lr_drops": [7]},
      "seeds": [0, 1, 2],
      "per_class": 10,
      "train": true,
      "out": "runs/sweep"
    }

The ``network`` entry may also be a full spec dict as produced by
``NetworkSpec.to_dict``: ``{"input_shape": [...], "num_classes": k, "layers":
[{"kind": "conv2d", "out_channels": 8, "kernel": 3, ...}, ...]}``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..autodiff import count_passes
from ..netgraph import Mask, NetworkSpec, ParamSet, build_network, max_compression, ones_mask, spec_from_config
from ..pruner import (CompressionSchedule, IterationRecord, PruneReport, _select, default_grid,
                      detect_layer_collapse, keep_count, prune, prune_cut_ratio)
from ..scoring import DATA_DEPENDENT, ScoreMap, ScoringContext
from .data import Dataset, gen_synthetic
from .training import Hyperparams, accuracy, train

log = logging.getLogger(__name__)

GRASP_MULTIPLIER = 3  # one gradient plus two for the central-difference Hessian-vector product
SCORING_EXAMPLES_PER_CLASS = 10


@dataclass(frozen=True)
class ScorerSpec:
    kind: str
    n: int | None = None
    label: str | None = None

    @property
    def iterations(self) -> int:
        if self.n is not None:
            return self.n
        return 100 if self.kind == "synflow" else 1

    @property
    def name(self) -> str:
        return self.label or (self.kind if self.n is None else f"{self.kind}-n{self.n}")


def _scorer_spec(value) -> ScorerSpec:
    if isinstance(value, ScorerSpec):
        return value
    if isinstance(value, str):
        return ScorerSpec(value)
    return ScorerSpec(**value)


@dataclass
class ExperimentConfig:
    network: object = "toy-vgg"
    scorers: list = field(default_factory=lambda: [ScorerSpec("synflow")])
    grid: list | None = None
    grid_step: float = 0.25
    schedule: str = "exponential"
    dataset: dict = field(default_factory=lambda: {"classes": 10, "samples": 1000, "separation": 3.0})
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    per_class: int = SCORING_EXAMPLES_PER_CLASS
    train: bool = True
    out: str | None = None

    def __post_init__(self):
        self.scorers = [_scorer_spec(s) for s in self.scorers]
        if isinstance(self.hyperparams, dict):
            hp = dict(self.hyperparams)
            if "lr_drops" in hp:
                hp["lr_drops"] = tuple(hp["lr_drops"])
            self.hyperparams = Hyperparams(**hp)
        if self.grid is not None:
            self.grid = [float(r) for r in self.grid]
            if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
                raise ValueError(f"sweep grid must be strictly increasing: {self.grid}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.scorers:
            raise ValueError("at least one scorer is required")

    @property
    def spec(self) -> NetworkSpec:
        return spec_from_config(self.network)

    def resolved_grid(self) -> list[float]:
        return list(self.grid) if self.grid is not None else default_grid(self.spec, self.grid_step)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["scorers"] = [asdict(s) for s in self.scorers]
        hp = asdict(self.hyperparams)
        hp["lr_drops"] = list(hp["lr_drops"])
        d["hyperparams"] = hp
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_dataset(spec: NetworkSpec, options: dict, seed: int) -> Dataset:
    shape = spec.input_shape
    dim = shape[0] if len(shape) == 1 else shape
    opts = dict(options)
    classes = opts.pop("classes", spec.num_classes)
    samples = opts.pop("samples", 1000)
    return gen_synthetic(classes, dim, samples, seed, **opts)


def cell_seed(seed: int, index: int) -> int:
    """Independent training stream for grid position ``index`` under ``seed``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_scorer(scorer: ScorerSpec, dataset: Dataset | None, seed: int, per_class: int = SCORING_EXAMPLES_PER_CLASS):
    batch = dataset.scoring_batch(per_class, seed) if scorer.kind in DATA_DEPENDENT else None
    return ScoringContext(scorer.kind, batch=batch, seed=seed)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepCell:
    scorer: str
    kind: str
    n: int
    seed: int
    rho: float
    collapsed: bool
    collapsed_layers: list[int]
    fractions: dict[int, float]
    accuracy: float
    trained: bool
    failed: bool = False
    reason: str = ""
    passes: int = 0
    crashed: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = {str(k): v for k, v in self.fractions.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepCell":
        d = dict(d)
        d["fractions"] = {int(k): float(v) for k, v in d["fractions"].items()}
        return cls(**d)


@dataclass
class SummaryRow:
    scorer: str
    rho: float
    runs: int
    collapsed_runs: int
    accuracy_min: float
    accuracy_mean: float
    accuracy_max: float


@dataclass
class SweepReport:
    config: dict
    classes: int
    rho_max: float
    cells: list[SweepCell]

    @property
    def chance(self) -> float:
        return 1.0 / self.classes

    def sorted_cells(self) -> list[SweepCell]:
        """Cells ordered by (config scorer order, seed, rho), whatever order they were produced in."""
        names = [_scorer_spec(s).name for s in self.config.get("scorers", [])]
        order = {s: i for i, s in enumerate(names)}
        return sorted(self.cells, key=lambda c: (order.get(c.scorer, len(order)), c.scorer, c.seed, c.rho))

    def scorers(self) -> list[str]:
        return list(dict.fromkeys(c.scorer for c in self.sorted_cells()))

    def seeds(self) -> list[int]:
        return sorted({c.seed for c in self.cells})

    def cells_for(self, scorer: str, seed: int | None = None) -> list[SweepCell]:
        return [c for c in self.sorted_cells() if c.scorer == scorer and (seed is None or c.seed == seed)]

    def first_collapse(self, scorer: str, seed: int) -> float | None:
        """Smallest grid ratio at which this scorer collapsed, or None."""
        return next((c.rho for c in self.cells_for(scorer, seed) if c.collapsed), None)

    def critical_compression(self, scorer: str, seed: int) -> float:
        best = 1.0
        for c in self.cells_for(scorer, seed):
            if c.collapsed:
                break
            best = c.rho
        return best

    def summary(self) -> list[SummaryRow]:
        rows = []
        for scorer in self.scorers():
            rhos = sorted({c.rho for c in self.cells_for(scorer)})
            for rho in rhos:
                group = [c for c in self.cells_for(scorer) if c.rho == rho]
                acc = np.array([c.accuracy for c in group], dtype=float)
                ok = acc[np.isfinite(acc)]
                stats = (float(ok.min()), float(ok.mean()), float(ok.max())) if ok.size else (math.nan,) * 3
                rows.append(SummaryRow(scorer, rho, len(group), sum(c.collapsed for c in group), *stats))
        return rows

    CSV_COLUMNS = ("scorer", "kind", "n", "seed", "rho", "collapsed", "collapsed_layers", "accuracy", "trained",
                   "failed", "crashed", "passes")

    def csv_header(self) -> tuple:
        layers = sorted({k for c in self.cells for k in c.fractions})
        return self.CSV_COLUMNS + tuple(f"fraction_{k}" for k in layers)

    def csv_rows(self) -> list[tuple]:
        layers = [int(h.split("_")[1]) for h in self.csv_header()[len(self.CSV_COLUMNS):]]
        rows = []
        for c in self.sorted_cells():
            rows.append((c.scorer, c.kind, c.n, c.seed, c.rho, int(c.collapsed),
                         ";".join(str(i) for i in c.collapsed_layers), c.accuracy, int(c.trained), int(c.failed),
                         int(c.crashed), c.passes) + tuple(c.fractions.get(k, math.nan) for k in layers))
        return rows

    def to_dict(self) -> dict:
        return {"config": self.config, "classes": self.classes, "rho_max": self.rho_max,
                "cells": [c.to_dict() for c in self.sorted_cells()]}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        return cls(d["config"], d["classes"], d["rho_max"], [SweepCell.from_dict(c) for c in d["cells"]])


def run_cell(spec: NetworkSpec, params: ParamSet, dataset: Dataset, scorer: ScorerSpec, rho: float, seed: int,
             hp: Hyperparams, train_seed: int, per_class: int = SCORING_EXAMPLES_PER_CLASS,
             schedule: str = "exponential", do_train: bool = True) -> SweepCell:
    """Prune at initialization, check collapse, then train and test one (scorer, rho, seed) cell.

    A collapsed network has no input-to-output path, so it is evaluated as is
    (its output is constant) rather than trained.
    """
    n = scorer.iterations
    try:
        context = make_scorer(scorer, dataset, seed, per_class)
        with count_passes() as tally:
            report = prune(spec, params, context, CompressionSchedule(rho, n, schedule))
    except Exception as exc:  # recorded per cell
        log.warning("cell %s rho=%g seed=%d failed: %s", scorer.name, rho, seed, exc)
        return SweepCell(scorer.name, scorer.kind, n, seed, rho, False, [], {}, math.nan, False, True, str(exc),
                         crashed=True)
    fractions = {i: report.remaining[i] / report.totals[i] for i in report.totals}
    cell = SweepCell(scorer.name, scorer.kind, n, seed, rho, report.collapsed, report.collapsed_layers, fractions,
                     math.nan, False, passes=tally.examples)
    mask = report.final_mask
    if report.collapsed or not do_train:
        cell.accuracy = accuracy(params, mask, dataset.x_test, dataset.y_test)
        return cell
    hp_cell = Hyperparams(**{**asdict(hp), "seed": train_seed, "eval_every_epoch": False})
    _, history = train(params, mask, dataset, hp_cell)
    cell.trained = True
    cell.accuracy = history.final_test_accuracy
    cell.failed, cell.reason = history.failed, history.reason
    return cell


def run_sweep(config: ExperimentConfig, progress=None) -> SweepReport:
    """Every scorer at every grid ratio for every seed.

    Within a seed the dataset, the initialization and each grid position's
    training stream are shared by all scorers, so at ``rho = 1`` every
    scorer reproduces the dense baseline exactly.
    """
    spec = config.spec
    grid = config.resolved_grid()
    cells = []
    classes = None
    for seed in config.seeds:
        dataset = make_dataset(spec, config.dataset, seed)
        classes = dataset.classes
        params = build_network(spec, seed)
        for scorer in config.scorers:
            for index, rho in enumerate(grid):
                cell = run_cell(spec, params, dataset, scorer, rho, seed, config.hyperparams,
                                cell_seed(seed, index), config.per_class, config.schedule, config.train)
                cells.append(cell)
                if progress is not None:
                    progress(cell)
    return SweepReport(config.to_dict(), classes, max_compression(spec), cells)


def iterative_snip_comparison(spec: NetworkSpec, params: ParamSet, dataset: Dataset, seed: int = 0,
                              grid: list[float] | None = None, iterations=(1, 100)) -> dict[str, float]:
    """Critical compression of SNIP at each iteration count, next to SynFlow's."""
    from ..pruner import critical_compression

    grid = grid or default_grid(spec)
    out = {}
    for n in iterations:
        context = make_scorer(ScorerSpec("snip"), dataset, seed)
        out[f"snip-n{n}"] = critical_compression(spec, params, context, n=n, grid=grid)
    out["synflow"] = critical_compression(spec, params, ScoringContext("synflow"), n=100, grid=grid)
    return out


# ---------------------------------------------------------------------------
# iterative magnitude pruning


@dataclass
class ImpResult:
    report: PruneReport
    accuracy: float
    initial: ParamSet
    failed: bool = False

    def to_dict(self) -> dict:
        return {"report": self.report.to_dict(), "accuracy": self.accuracy, "failed": self.failed}


def rewind(initial: ParamSet, mask: Mask) -> ParamSet:
    """Initial parameters with the mask applied; surviving weights are bit-identical to ``initial``."""
    p = initial.copy()
    for i, m in mask.items():
        p.tensors[i]["weight"] = p.tensors[i]["weight"] * m
    return p


def imp_toy(spec: NetworkSpec, params: ParamSet, dataset: Dataset, cycles: int, per_cycle_ratio: float,
            hp: Hyperparams, final_train: bool = True) -> ImpResult:
    """Train, globally magnitude-prune the trained weights, rewind to initialization; ``cycles`` times.

    Cycle ``c`` keeps ``per_cycle_ratio ** -c`` of all prunable weights, so
    the final compression is ``per_cycle_ratio ** cycles``.
    """
    if cycles < 1:
        raise ValueError(f"cycles must be >= 1, got {cycles}")
    if per_cycle_ratio < 1:
        raise ValueError(f"per-cycle ratio must be >= 1, got {per_cycle_ratio}")
    total = params.num_prunable()
    final_rho = per_cycle_ratio ** cycles
    if final_rho > total:
        raise ValueError(f"compression {final_rho} exceeds the {total} prunable parameters")
    mask = ones_mask(params)
    totals = {i: int(m.size) for i, m in mask.items()}
    records = []
    for c in range(1, cycles + 1):
        hp_cycle = Hyperparams(**{**asdict(hp), "seed": cell_seed(hp.seed, c), "eval_every_epoch": False})
        trained, history = train(rewind(params, mask), mask, dataset, hp_cycle)
        if history.failed:
            log.warning("IMP cycle %d diverged: %s", c, history.reason)
        scores = ScoreMap({i: np.abs(trained.tensors[i]["weight"]) for i in mask}, mask)
        fraction = per_cycle_ratio ** (-c)
        target = keep_count(total, fraction)
        new_mask, threshold = _select(scores, target)
        ratio = prune_cut_ratio(scores, mask, new_mask)
        pruned = sum(float(scores.scores[i][(mask[i] != 0) & (new_mask[i] == 0)].sum()) for i in mask)
        cut = min(float(scores.scores[i][mask[i] != 0].sum()) for i in mask)
        mask = new_mask
        records.append(IterationRecord(c, fraction, target, threshold, pruned, cut, ratio,
                                       {i: int(np.count_nonzero(m)) for i, m in mask.items()}))
    collapsed, layers = detect_layer_collapse(spec, mask)
    report = PruneReport("imp-magnitude", final_rho, cycles, "exponential", totals, records, mask, collapsed, layers)
    acc, failed = math.nan, False
    if final_train:
        if collapsed:
            acc = accuracy(params, mask, dataset.x_test, dataset.y_test)
        else:
            hp_final = Hyperparams(**{**asdict(hp), "seed": cell_seed(hp.seed, 0), "eval_every_epoch": False})
            _, history = train(rewind(params, mask), mask, dataset, hp_final)
            acc, failed = history.final_test_accuracy, history.failed
    return ImpResult(report, acc, params, failed)


def imp_critical_compression(spec: NetworkSpec, params: ParamSet, dataset: Dataset, cycles: int,
                             grid: list[float], hp: Hyperparams) -> float:
    """Largest grid ratio that IMP with ``cycles`` cycles reaches before the first layer-collapse."""
    best = 1.0
    for rho in grid:
        result = imp_toy(spec, params, dataset, cycles, rho ** (1.0 / cycles), hp, final_train=False)
        if result.report.collapsed:
            break
        best = rho
    return best


# ---------------------------------------------------------------------------
# pass accounting


def pass_count(scorer: str, schedule: CompressionSchedule | int, dataset: Dataset | int,
               batch_size: int | None = None) -> int:
    """Forward/backward passes a scorer spends over a whole prune run.

    A pass is one example through the network (``batch_size=None``), or one
    batched backward call when ``batch_size`` is given.  SynFlow uses a
    single all-ones input per iteration; SNIP and GraSP use ten examples per
    class per iteration, GraSP with a multiplier of ``GRASP_MULTIPLIER``.
    Magnitude and random scoring need no passes.
    """
    n = schedule.n if isinstance(schedule, CompressionSchedule) else int(schedule)
    classes = dataset.classes if isinstance(dataset, Dataset) else int(dataset)
    if scorer == "synflow":
        return n
    if scorer in ("magnitude", "random"):
        return 0
    if scorer not in ("snip", "grasp"):
        raise ValueError(f"unknown scorer {scorer!r}")
    examples = SCORING_EXAMPLES_PER_CLASS * classes
    per_iteration = examples if batch_size is None else math.ceil(examples / batch_size)
    multiplier = GRASP_MULTIPLIER if scorer == "grasp" else 1
    return n * per_iteration * multiplier


__all__ = [
    "ExperimentConfig", "ScorerSpec", "SweepCell", "SweepReport", "SummaryRow", "ImpResult", "GRASP_MULTIPLIER",
    "run_sweep", "run_cell", "make_dataset", "make_scorer", "cell_seed", "iterative_snip_comparison", "imp_toy",
    "imp_critical_compression", "rewind", "pass_count",
]
