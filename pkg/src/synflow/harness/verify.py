"""The conservation verification suite run by ``synflow verify``."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..conservation import (TOLERANCE, bn_saliency_zero, check_network_conservation, check_neuron_conservation,
                            inverse_law_spread, layer_score_size_law)
from ..netgraph import (NetworkSpec, batchnorm, build_network, conv, dense, flatten, maxpool, mlp, relu, toy_conv,
                        toy_conv_residual, toy_residual)
from ..scoring import saliency, score_synflow, synflow_closed_form

ORACLE_TOLERANCE = 1e-10


def verification_architectures() -> dict[str, NetworkSpec]:
    """The ReLU test architectures: dense, dense with bias, conv, conv with pooling and two residual nets."""
    return {
        "dense": mlp([6, 8, 5, 3], bias=False),
        "dense-bias": mlp([6, 8, 5, 3], bias=True),
        "conv": toy_conv(bias=True, pool=False),
        "conv-pool": toy_conv(bias=True, pool=True),
        "residual": toy_residual(),
        "conv-residual": toy_conv_residual(),
    }


def bn_network(eps: float = 0.0) -> NetworkSpec:
    """Conv and dense layers each followed by batch-norm; ``eps=0`` makes batch-norm exactly scale-invariant."""
    return NetworkSpec((2, 6, 6), [conv(4), batchnorm(eps), relu(), maxpool(2), flatten(), dense(6), batchnorm(eps),
                                   relu(), dense(3)])


@dataclass
class CheckResult:
    check: str
    architecture: str
    value: float
    tolerance: float
    passed: bool


@dataclass
class VerifyReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def add(self, check: str, architecture: str, value: float, tolerance: float, passed: bool | None = None):
        ok = value <= tolerance if passed is None else passed
        self.results.append(CheckResult(check, architecture, float(value), float(tolerance), bool(ok)))

    def csv_header(self) -> tuple:
        return ("check", "architecture", "value", "tolerance", "passed")

    def csv_rows(self) -> list[tuple]:
        return [(r.check, r.architecture, r.value, r.tolerance, int(r.passed)) for r in self.results]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "results": [asdict(r) for r in self.results]}

    @classmethod
    def from_dict(cls, d: dict) -> "VerifyReport":
        return cls([CheckResult(**r) for r in d["results"]])


def _random_input(spec: NetworkSpec, rng) -> np.ndarray:
    return rng.standard_normal((4, *spec.input_shape))


def run_verification(seed: int = 0, oracle_nets: int = 20) -> VerifyReport:
    """Neuron-wise and cut conservation, the SynFlow closed-form oracle, the size law and the batch-norm law."""
    rng = np.random.default_rng(seed)
    report = VerifyReport()
    for name, spec in verification_architectures().items():
        params = build_network(spec, seed)
        x = _random_input(spec, rng)
        for objective, inp in (("sum", x), ("synflow", None)):
            report.add(f"neuron-{objective}", name, check_neuron_conservation(params, None, objective, inp).max_residual,
                       TOLERANCE)
            report.add(f"cut-{objective}", name, check_network_conservation(params, None, objective, inp).max_residual,
                       TOLERANCE)

    worst = 0.0
    for k in range(oracle_nets):
        depth = int(rng.integers(2, 6))
        sizes = [int(v) for v in rng.integers(2, 8, size=depth + 1)]
        params = build_network(mlp(sizes, bias=False), seed * 1000 + k)
        got, want = score_synflow(params, None), synflow_closed_form(params, None)
        for i in got.layers:
            err = np.abs(got.scores[i] - want.scores[i]) / np.maximum(np.abs(want.scores[i]), 1e-300)
            worst = max(worst, float(err.max()))
    report.add("synflow-closed-form", f"{oracle_nets} random dense nets", worst, ORACLE_TOLERANCE)

    spec = mlp([10, 40, 10, 4], bias=False)
    params = build_network(spec, seed)
    law = layer_score_size_law({"saliency": saliency(params, None, x=rng.standard_normal((8, 10)))})
    report.add("inverse-size-law", "dense", inverse_law_spread(law), TOLERANCE)

    spec = bn_network()
    params = build_network(spec, seed)
    rows = bn_saliency_zero(params, _random_input(spec, rng) * 2 + 1)
    report.add("batchnorm-train-saliency", "conv-bn", max(r.relative for r in rows), TOLERANCE)
    params = build_network(bn_network(1e-5), seed)
    rows = bn_saliency_zero(params, _random_input(spec, rng))
    worst = max(abs(r.total - r.eps_term) / r.scale for r in rows)
    report.add("batchnorm-eps-residual", "conv-bn eps=1e-5", worst, TOLERANCE)
    eval_total = min(float(score_synflow(params, None, "eval").present(i).sum()) for i in spec.prunable_layers)
    report.add("batchnorm-eval-synflow-positive", "conv-bn", eval_total, 0.0, passed=eval_total > 0)
    return report


__all__ = ["CheckResult", "VerifyReport", "run_verification", "verification_architectures", "bn_network"]
