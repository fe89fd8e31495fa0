"""Global masking, compression schedules and the iterative prune loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .netgraph import Mask, NetworkSpec, ParamSet, max_compression, ones_mask
from .scoring import ScoreMap


class PruneError(RuntimeError):
    """A scorer failed inside the prune loop; the message carries the iteration."""


@dataclass(frozen=True)
class CompressionSchedule:
    rho: float
    n: int = 100
    kind: str = "exponential"

    def __post_init__(self):
        if not self.rho >= 1:
            raise ValueError(f"compression ratio must be >= 1, got {self.rho}")
        if self.n < 1:
            raise ValueError(f"iterations must be >= 1, got {self.n}")
        if self.kind not in ("exponential", "linear"):
            raise ValueError(f"schedule kind must be 'exponential' or 'linear', got {self.kind!r}")

    def keep_fraction(self, k: int) -> float:
        if self.kind == "exponential":
            return self.rho ** (-k / self.n)
        return 1.0 - (k / self.n) * (1.0 - 1.0 / self.rho)

    def fractions(self) -> list[float]:
        return [self.keep_fraction(k) for k in range(1, self.n + 1)]


def keep_count(total: int, fraction: float) -> int:
    """``ceil(total * fraction)``, ignoring floating-point fuzz just above an integer."""
    x = total * fraction
    nearest = round(x)
    if abs(x - nearest) <= 1e-9 * max(1.0, x):
        return int(nearest)
    return int(math.ceil(x))


def _ranked(scores: ScoreMap):
    """Present scores with their (layer, flat index), sorted ascending with ties in (layer, index) order."""
    vals, layers, idx = [], [], []
    for i in scores.layers:
        flat_mask = scores.mask[i].ravel() != 0
        positions = np.flatnonzero(flat_mask)
        vals.append(scores.scores[i].ravel()[positions])
        layers.append(np.full(positions.size, i))
        idx.append(positions)
    vals, layers, idx = (np.concatenate(a) if a else np.empty(0) for a in (vals, layers, idx))
    order = np.lexsort((idx, layers, vals))
    return vals[order], layers[order].astype(int), idx[order].astype(int)


def _select(scores: ScoreMap, keep: int, safeguard: bool = False):
    vals, layers, idx = _ranked(scores)
    m = vals.size
    if m == 0:
        raise ValueError("cannot select from an empty ScoreMap")
    keep = min(max(keep, 0), m)
    kept = np.zeros(m, dtype=bool)
    kept[m - keep:] = True
    if safeguard and keep > 0:
        kept = _protect_layers(kept, layers)
    mask = {i: np.zeros_like(scores.mask[i]) for i in scores.layers}
    for i in scores.layers:
        sel = kept & (layers == i)
        mask[i].reshape(-1)[idx[sel]] = 1.0
    pruned = ~kept
    threshold = float(vals[pruned].max()) if pruned.any() else float("-inf")
    return mask, threshold


def _protect_layers(kept: np.ndarray, layers: np.ndarray) -> np.ndarray:
    """Re-admit the best entry of any emptied layer, dropping the lowest kept entries of crowded layers."""
    kept = kept.copy()
    for layer in np.unique(layers):
        members = np.flatnonzero(layers == layer)
        if kept[members].any():
            continue
        kept[members[-1]] = True  # highest score in ascending order
        counts = {int(l): int(np.count_nonzero(kept & (layers == l))) for l in np.unique(layers)}
        for pos in np.flatnonzero(kept):
            if counts[int(layers[pos])] > 1:
                kept[pos] = False
                break
    return kept


def select_mask(scores: ScoreMap, keep_fraction: float, reference_count: int | None = None) -> Mask:
    """Keep the ``ceil(keep_fraction * count)`` highest scores globally.

    ``count`` is the number of scored (unmasked) parameters unless
    ``reference_count`` is given.  Equal scores are ordered by (layer, flat
    index); lower positions are pruned first.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    total = scores.count() if reference_count is None else reference_count
    return _select(scores, keep_count(total, keep_fraction))[0]


def prune_cut_ratio(scores: ScoreMap, old_mask: Mask, new_mask: Mask, spec: NetworkSpec | None = None) -> float:
    """Score removed this iteration divided by the smallest per-layer total score before removal."""
    pruned = 0.0
    cut = math.inf
    for i in scores.layers:
        s = scores.scores[i]
        old = old_mask[i] != 0
        if np.any((new_mask[i] != 0) & ~old):
            raise ValueError(f"layer {i}: new mask is not a subset of the old mask")
        pruned += float(s[old & (new_mask[i] == 0)].sum())
        cut = min(cut, float(s[old].sum()))
    if pruned == 0:
        return 0.0
    return pruned / cut if cut > 0 else math.inf


def detect_layer_collapse(spec: NetworkSpec, mask: Mask) -> tuple[bool, list[int]]:
    """Layers left empty while other prunable parameters survive."""
    empty = [i for i in spec.prunable_layers if not np.any(mask[i])]
    remaining = sum(int(np.count_nonzero(mask[i])) for i in spec.prunable_layers)
    collapsed = bool(empty) and remaining > 0
    return collapsed, empty if collapsed else []


@dataclass
class IterationRecord:
    iteration: int
    keep_fraction: float
    target: int
    threshold: float
    prune_size: float
    min_cut_size: float
    ratio: float
    remaining: dict[int, int]
    unchanged: bool = False

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["remaining"] = {str(k): v for k, v in self.remaining.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        d = dict(d)
        d["remaining"] = {int(k): v for k, v in d["remaining"].items()}
        return cls(**d)


@dataclass
class PruneReport:
    scorer: str
    rho: float
    n: int
    schedule: str
    totals: dict[int, int]
    iterations: list[IterationRecord]
    final_mask: Mask
    collapsed: bool
    collapsed_layers: list[int]
    passes: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def remaining(self) -> dict[int, int]:
        return {i: int(np.count_nonzero(m)) for i, m in self.final_mask.items()}

    @property
    def max_ratio(self) -> float:
        return max((r.ratio for r in self.iterations if not r.unchanged), default=0.0)

    def to_dict(self) -> dict:
        return {
            "scorer": self.scorer, "rho": self.rho, "n": self.n, "schedule": self.schedule,
            "totals": {str(k): v for k, v in self.totals.items()},
            "collapsed": self.collapsed, "collapsed_layers": self.collapsed_layers, "passes": self.passes,
            "extra": self.extra,
            "iterations": [r.to_dict() for r in self.iterations],
            "final_mask": {str(k): {"shape": list(m.shape), "keep": np.flatnonzero(m).tolist()}
                           for k, m in self.final_mask.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneReport":
        mask = {}
        for k, v in d["final_mask"].items():
            m = np.zeros(int(np.prod(v["shape"])))
            m[v["keep"]] = 1.0
            mask[int(k)] = m.reshape(v["shape"])
        return cls(d["scorer"], d["rho"], d["n"], d["schedule"], {int(k): v for k, v in d["totals"].items()},
                   [IterationRecord.from_dict(r) for r in d["iterations"]], mask, d["collapsed"],
                   list(d["collapsed_layers"]), d.get("passes", 0), d.get("extra", {}))

    CSV_COLUMNS = ("iteration", "layer", "remaining", "total", "prune_size", "min_cut_size")

    def csv_rows(self) -> list[tuple]:
        rows = []
        for r in self.iterations:
            for layer, left in sorted(r.remaining.items()):
                rows.append((r.iteration, layer, left, self.totals[layer], r.prune_size, r.min_cut_size))
        return rows


def _scorer_name(scorer) -> str:
    return getattr(scorer, "kind", getattr(scorer, "__name__", type(scorer).__name__))


def prune(spec: NetworkSpec, params: ParamSet, scorer: Callable[[ParamSet, Mask], ScoreMap],
          schedule: CompressionSchedule, safeguard: bool = False, mask: Mask | None = None) -> PruneReport:
    """Iterative global pruning: re-score, keep the schedule's fraction, repeat ``schedule.n`` times.

    With the SynFlow scorer, ``n=100`` and the exponential schedule this is
    the SynFlow algorithm.  Keep counts are relative to the full prunable
    count.  Every iteration is scored; one whose count does not shrink leaves
    the mask unchanged.
    """
    total = params.num_prunable()
    if schedule.rho > total:
        raise ValueError(f"compression {schedule.rho} exceeds the {total} prunable parameters")
    mask = ones_mask(params) if mask is None else {i: m.copy() for i, m in mask.items()}
    totals = {i: int(m.size) for i, m in mask.items()}
    records = []
    for k in range(1, schedule.n + 1):
        fraction = schedule.keep_fraction(k)
        target = keep_count(total, fraction)
        current = sum(int(np.count_nonzero(m)) for m in mask.values())
        try:
            scores = scorer(params, mask)
        except Exception as exc:
            raise PruneError(f"iteration {k}: scorer {_scorer_name(scorer)} failed: {exc}") from exc
        cut = min(float(scores.scores[i][mask[i] != 0].sum()) for i in mask)
        if target >= current:
            records.append(IterationRecord(k, fraction, target, float("nan"), 0.0, cut, 0.0,
                                           {i: int(np.count_nonzero(m)) for i, m in mask.items()}, True))
            continue
        new_mask, threshold = _select(scores, target, safeguard)
        ratio = prune_cut_ratio(scores, mask, new_mask, spec)
        pruned = sum(float(scores.scores[i][(mask[i] != 0) & (new_mask[i] == 0)].sum()) for i in mask)
        mask = new_mask
        records.append(IterationRecord(k, fraction, target, threshold, pruned, cut, ratio,
                                       {i: int(np.count_nonzero(m)) for i, m in mask.items()}))
    collapsed, layers = detect_layer_collapse(spec, mask)
    return PruneReport(_scorer_name(scorer), schedule.rho, schedule.n, schedule.kind, totals, records, mask,
                       collapsed, layers)


def default_grid(spec: NetworkSpec, step: float = 0.25) -> list[float]:
    """10^{0, step, 2 step, ...} up to the maximal compression, which is appended."""
    top = max_compression(spec)
    grid = []
    a = 0.0
    while 10 ** a < top * (1 - 1e-12):
        grid.append(10 ** a)
        a = round(a + step, 10)
    grid.append(top)
    return grid


@dataclass
class SweepPoint:
    rho: float
    collapsed: bool
    collapsed_layers: list[int]
    remaining: dict[int, int]
    max_ratio: float


def compression_sweep(spec: NetworkSpec, params: ParamSet, scorer, n: int = 100, kind: str = "exponential",
                      grid: list[float] | None = None, stop_at_collapse: bool = True) -> list[SweepPoint]:
    points = []
    for rho in grid or default_grid(spec):
        report = prune(spec, params, scorer, CompressionSchedule(rho, n, kind))
        points.append(SweepPoint(rho, report.collapsed, report.collapsed_layers, report.remaining,
                                 report.max_ratio))
        if report.collapsed and stop_at_collapse:
            break
    return points


def critical_compression(spec: NetworkSpec, params: ParamSet, scorer, n: int = 100, kind: str = "exponential",
                         grid: list[float] | None = None) -> float:
    """Largest grid ratio reached before the first layer-collapse (1.0 if the first point collapses)."""
    best = 1.0
    for point in compression_sweep(spec, params, scorer, n, kind, grid):
        if point.collapsed:
            break
        best = point.rho
    return best


__all__ = [
    "CompressionSchedule", "PruneReport", "IterationRecord", "PruneError", "SweepPoint", "keep_count",
    "select_mask", "prune", "detect_layer_collapse", "critical_compression", "compression_sweep",
    "prune_cut_ratio", "default_grid",
]
