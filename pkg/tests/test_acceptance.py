"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line to the terminal summary."""

import math
import time

import numpy as np

from synflow.autodiff import GradientSet, count_passes, hvp, loss_and_grad, weights_only
from synflow.conservation import (bn_saliency_zero, check_network_conservation, check_neuron_conservation,
                                  drift_scaling, gradient_flow_conservation, inverse_law_spread, layer_score_size_law)
from synflow.harness.experiments import (ExperimentConfig, ScorerSpec, iterative_snip_comparison, make_dataset,
                                         make_scorer, pass_count, run_sweep)
from synflow.harness.verify import bn_network, verification_architectures
from synflow.netgraph import build_network, imbalance_net, max_compression, mlp, toy_vgg
from synflow.pruner import CompressionSchedule, compression_sweep, default_grid, detect_layer_collapse, prune
from synflow.scoring import ScoringContext, saliency, score_synflow, synflow_closed_form

from conftest import FD_RTOL, check_gradients, linear_net
from test_autodiff import GRADIENT_NETS, classify_batch, dense_hessian, randomize

TOLERANCE = 1e-8


def with_biases(params, rng, scale=0.2):
    for _, name, arr in params.items():
        if name == "bias":
            arr[...] = scale * rng.standard_normal(arr.shape)
    return params


def conservation_cases(seed=0):
    """Every test architecture with random biases, paired with both objectives."""
    rng = np.random.default_rng(seed)
    for name, spec in verification_architectures().items():
        params = with_biases(build_network(spec, seed), rng)
        yield name, params, "sum", rng.standard_normal((4, *spec.input_shape))
        yield name, params, "synflow", None


def test_criterion_01_neuron_conservation(record):
    start = time.perf_counter()
    worst, units, failures = 0.0, 0, []
    for name, params, objective, x in conservation_cases():
        report = check_neuron_conservation(params, objective=objective, x=x)
        units += len(report.units)
        worst = max(worst, report.max_residual)
        if report.max_residual > TOLERANCE or not report.units:
            failures.append(f"{name}/{objective}")
    elapsed = time.perf_counter() - start
    passed = not failures and elapsed < 10 and len(verification_architectures()) >= 5
    record(1, "neuron-wise conservation", passed,
           f"{len(verification_architectures())} architectures, {units} unit checks, max residual {worst:.1e}, "
           f"{elapsed:.2f} s" + (f", failing {failures}" if failures else ""))
    assert passed


def test_criterion_02_cut_conservation(record):
    worst, cuts, failures = 0.0, 0, []
    for name, params, objective, x in conservation_cases(seed=1):
        report = check_network_conservation(params, objective=objective, x=x)
        cuts += len(report.cuts)
        worst = max(worst, report.max_residual)
        if report.max_residual > TOLERANCE:
            failures.append(f"{name}/{objective}")
    passed = not failures
    record(2, "cut conservation", passed, f"{cuts} cuts, max residual {worst:.1e}"
           + (f", failing {failures}" if failures else ""))
    assert passed


def test_criterion_03_closed_form_oracle(record):
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(20):
        depth = int(rng.integers(2, 6))
        sizes = [int(v) for v in rng.integers(2, 9, size=depth + 1)]
        params = build_network(mlp(sizes, bias=False), k)
        got, want = score_synflow(params, None), synflow_closed_form(params, None)
        for i in got.layers:
            err = np.abs(got.scores[i] - want.scores[i]) / np.maximum(np.abs(want.scores[i]), 1e-300)
            worst = max(worst, float(err.max()))
    passed = worst <= 1e-10
    record(3, "SynFlow closed-form oracle", passed, f"20 nets of 2-5 layers, max relative error {worst:.1e}")
    assert passed


def test_criterion_04_maximal_critical_compression(record):
    start = time.perf_counter()
    archs = {**verification_architectures(), "toy-vgg": toy_vgg(), "imbalance": imbalance_net()}
    failures = []
    for name, spec in archs.items():
        params = build_network(spec, 0)
        for rho in default_grid(spec):
            report = prune(spec, params, ScoringContext("synflow"), CompressionSchedule(rho, 100))
            problems = []
            if detect_layer_collapse(spec, report.final_mask)[0]:
                problems.append(f"collapse {report.collapsed_layers}")
            if report.max_ratio >= 1:
                problems.append(f"cut ratio {report.max_ratio:.2f}")
            if rho == max_compression(spec) and any(v != 1 for v in report.remaining.values()):
                problems.append(f"survivors {report.remaining}")
            if problems:
                failures.append(f"{name} at rho={rho:g}: {', '.join(problems)}")
    elapsed = time.perf_counter() - start
    passed = not failures and elapsed < 120
    record(4, "maximal critical compression", passed, f"{len(archs)} architectures, {elapsed:.1f} s"
           + (f"; {'; '.join(failures)}" if failures else ""))
    assert passed


def test_criterion_05_layer_collapse_patterns(record):
    spec = imbalance_net()
    big, small = spec.prunable_layers
    expected = {"synflow": big, "magnitude": big, "random": small}
    hits = {kind: 0 for kind in expected}
    seeds = range(20)
    for seed in seeds:
        params = build_network(spec, seed)
        for kind, layer in expected.items():
            last = compression_sweep(spec, params, ScoringContext(kind, seed=seed), n=1)[-1]
            ok = last.collapsed and last.collapsed_layers == [layer]
            if kind == "synflow":
                ok = ok and last.rho >= 100
            hits[kind] += ok
    passed = all(h >= 0.95 * len(seeds) for h in hits.values())
    record(5, "layer-collapse patterns", passed,
           ", ".join(f"{k} empties layer {expected[k]} first in {h}/{len(seeds)} seeds" for k, h in hits.items()))
    assert passed


def test_criterion_06_inverse_size_law(record):
    rng = np.random.default_rng(6)
    worst = 0.0
    for sizes, activation in (([10, 40, 10, 4], True), ([5, 30, 7, 12, 3], True), ([8, 20, 6], False)):
        params = build_network(mlp(sizes, bias=False, activation=activation), 0)
        rows = layer_score_size_law({"saliency": saliency(params, None, x=rng.standard_normal((8, sizes[0]))),
                                     "synflow": score_synflow(params, None)})
        for scorer in ("saliency", "synflow"):
            worst = max(worst, inverse_law_spread([r for r in rows if r.method == scorer]))
    passed = worst <= TOLERANCE
    record(6, "inverse size-score law", passed, f"3 dense nets, max spread of average x size {worst:.1e}")
    assert passed


def test_criterion_07_gradient_flow(record):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((16, 3))
    data = (x, x @ rng.standard_normal((3, 2)))
    params = build_network(mlp([3, 4, 2], bias=False, activation=False), 0)
    coarse, fine = drift_scaling(params, data, 1e-3, 1000)
    scalar = linear_net([[[0.7]], [[1.3]]])
    one = (np.array([[1.0]]), np.array([[2.0]]))
    drifts = [gradient_flow_conservation(scalar, one, 1, lr).drift() for lr in (1e-2, 5e-3)]
    halving = 2 / 1.5 <= coarse / fine <= 2 * 1.5
    second_order = abs(drifts[0] / drifts[1] - 4) <= 0.2
    passed = halving and second_order
    record(7, "gradient-flow conservation", passed,
           f"drift {coarse:.2e} at lr 1e-3 vs {fine:.2e} at 5e-4 (ratio {coarse / fine:.2f}); "
           f"scalar one-step drift ratio {drifts[0] / drifts[1]:.2f} at halved lr")
    assert passed


def test_criterion_08_batchnorm(record):
    rng = np.random.default_rng(8)
    params = build_network(bn_network(eps=0.0), 0)
    rows = bn_saliency_zero(params, 2 * rng.standard_normal((8, 2, 6, 6)) + 1)
    worst = max(r.relative for r in rows)
    synflow = {}
    for name, spec in (("conv-bn", bn_network(1e-5)), ("toy-vgg", toy_vgg())):
        p = build_network(spec, 0)
        train = score_synflow(p, None, "train")
        evals = score_synflow(p, None, "eval")
        train_max = max(float(np.abs(train.scores[i]).max()) for i in train.layers)
        eval_max = max(float(evals.scores[i].max()) for i in evals.layers)
        eval_min_total = min(float(evals.present(i).sum()) for i in evals.layers)
        synflow[name] = (train_max <= TOLERANCE * eval_max, eval_min_total > 0, train_max, eval_min_total)
    passed = worst <= TOLERANCE and all(a and b for a, b, _, _ in synflow.values())
    record(8, "batch-norm law", passed, f"{len(rows)} neurons, max relative saliency sum {worst:.1e}; "
           + "; ".join(f"{k}: train max score {v[2]:.1e}, eval min layer total {v[3]:.3g}" for k, v in synflow.items()))
    assert passed


def test_criterion_09_derivative_machinery(record):
    rng = np.random.default_rng(9)
    fd_worst = 0.0
    for name, spec in GRADIENT_NETS.items():
        params = randomize(build_network(spec, 3), rng)
        fd_worst = max(fd_worst, check_gradients(params, classify_batch(spec, rng)))
        if name.startswith("batchnorm"):
            fd_worst = max(fd_worst, check_gradients(params, classify_batch(spec, rng, n=6), mode="train"))
    params = build_network(mlp([3, 4, 2], bias=False), 2)
    fd_worst = max(fd_worst, check_gradients(params, (rng.standard_normal((5, 3)), rng.standard_normal((5, 2))),
                                             loss="mse"))

    def fn(p, m, b):
        value, g = loss_and_grad(p, m, b, "cross-entropy", "eval")
        return value, weights_only(g, p)

    hvp_worst = 0.0
    for seed in range(3):
        spec = mlp([3, 4, 3], bias=True)
        params = randomize(build_network(spec, seed), rng)
        assert params.num_prunable() <= 50
        batch = classify_batch(spec, rng, n=5)
        keys, hess = dense_hessian(params, batch)
        v = rng.standard_normal(hess.shape[0])
        parts, start = {}, 0
        for i, n in keys:
            shape = params.tensors[i][n].shape
            parts[i] = {n: v[start:start + math.prod(shape)].reshape(shape)}
            start += math.prod(shape)
        hv = hvp(params, None, fn, batch, GradientSet(parts))
        got = np.concatenate([hv.grads[i][n].ravel() for i, n in keys])
        ref = hess @ v
        hvp_worst = max(hvp_worst, float(np.max(np.abs(got - ref)) / np.max(np.abs(ref))))
    passed = fd_worst <= FD_RTOL and hvp_worst <= 1e-3
    record(9, "derivative machinery", passed,
           f"finite differences max relative error {fd_worst:.1e} on {len(GRADIENT_NETS) + 1} nets; "
           f"HVP vs dense Hessian {hvp_worst:.1e}")
    assert passed


SWEEP_DATASET = {"classes": 10, "samples": 800, "separation": 3.0}
SWEEP_SEEDS = [0, 1, 2]
SINGLE_SHOT = ("snip", "grasp", "magnitude")


def test_criterion_10_toy_sweep(record):
    start = time.perf_counter()
    config = ExperimentConfig.from_dict({
        "network": "toy-vgg",
        "scorers": [{"kind": "synflow"}] + [{"kind": k} for k in SINGLE_SHOT],
        "grid_step": 0.5,
        "dataset": SWEEP_DATASET,
        "hyperparams": {"epochs": 8, "lr": 0.05, "lr_drops": [5]},
        "seeds": SWEEP_SEEDS,
    })
    report = run_sweep(config)
    chance, rho_max = report.chance, report.rho_max
    tests = len(make_dataset(config.spec, SWEEP_DATASET, 0).y_test)

    # SynFlow: mean accuracy over seeds must clear chance by two standard errors at every ratio
    margin = 2 * math.sqrt(chance * (1 - chance) / (tests * len(SWEEP_SEEDS)))
    below = [(row.rho, row.accuracy_mean) for row in report.summary()
             if row.scorer == "synflow" and (row.collapsed_runs or row.accuracy_mean <= chance + margin)]

    # single-shot scorers: a collapsed cell at chance accuracy before rho_max, on every seed
    seed_margin = 2 * math.sqrt(chance * (1 - chance) / tests)
    cliffs = {}
    for scorer in SINGLE_SHOT:
        cliffs[scorer] = [next((c.rho for c in report.cells_for(scorer, seed) if c.collapsed and c.rho < rho_max
                                and abs(c.accuracy - chance) <= seed_margin), None) for seed in SWEEP_SEEDS]
    cliffs_ok = all(r is not None for v in cliffs.values() for r in v)

    # iterative against single-shot SNIP on the fine grid
    spec = config.spec
    snip = []
    for seed in SWEEP_SEEDS:
        dataset = make_dataset(spec, SWEEP_DATASET, seed)
        snip.append(iterative_snip_comparison(spec, build_network(spec, seed), dataset, seed))
    iterative_ok = all(s["snip-n1"] < s["snip-n100"] < rho_max for s in snip)

    elapsed = time.perf_counter() - start
    passed = not below and cliffs_ok and iterative_ok and elapsed < 900
    record(10, "toy end-to-end sweep", passed,
           ("SynFlow above chance at every ratio" if not below else
            f"SynFlow not above chance + {margin:.3f} at "
            + ", ".join(f"rho={r:g} (mean {a:.3f})" for r, a in below))
           + "; cliffs " + ", ".join(f"{k} at {[round(r) if r else r for r in v]}" for k, v in cliffs.items())
           + "; SNIP n=1 vs n=100 critical " + ", ".join(f"{s['snip-n1']:g} < {s['snip-n100']:g}" for s in snip)
           + f" (rho_max {rho_max:g}); {elapsed:.0f} s")
    assert passed


def test_criterion_11_pass_accounting(record):
    spec = toy_vgg()
    params = build_network(spec, 0)
    schedule = CompressionSchedule(max_compression(spec), 100)
    rows = []
    ok = True
    for classes in (2, 5, 10):
        dataset = make_dataset(spec, {"classes": classes, "samples": 40 * classes}, 0)
        with count_passes() as tally:
            prune(spec, params, ScoringContext("synflow"), schedule)
        counts = {"synflow": tally.examples}
        for kind in ("snip", "grasp"):
            with count_passes() as tally:
                prune(spec, params, make_scorer(ScorerSpec(kind), dataset, 0), CompressionSchedule(10, 1))
            counts[kind] = tally.examples
        ok &= counts["synflow"] == 100 == pass_count("synflow", schedule, dataset)
        ok &= counts["snip"] == 10 * classes == pass_count("snip", 1, dataset)
        ok &= counts["grasp"] == 30 * classes == pass_count("grasp", 1, dataset)
        rows.append(f"{classes} classes: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    record(11, "pass accounting", bool(ok), "; ".join(rows))
    assert ok
