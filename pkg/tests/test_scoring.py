import numpy as np
import pytest

from synflow.autodiff import NumericError, loss_and_grad
from synflow.netgraph import NetworkSpec, StructureError, batchnorm, build_network, dense, mlp, ones_mask, relu, toy_conv
from synflow.scoring import (ScoreMap, ScoringContext, _synflow_objective, absolute, param_saliency, rescale_layers,
                             saliency, score_grasp, score_magnitude, score_random, score_snip, score_synflow,
                             synflow_closed_form, synflow_flow)

from conftest import linear_net

HAND_NET = [[[1.0, 2.0], [3.0, 4.0]], [[1.0, 1.0]]]


class TestSaliency:
    def test_definition(self):
        """y = w x with x = 3 gives dR/dw = 3; w = 2 gives S = 6."""
        params = linear_net([[[2.0]]])
        scores = saliency(params, None, x=np.array([[3.0]]))
        assert scores.scores[0].tolist() == [[6.0]]

    def test_zero_gradient(self):
        spec = NetworkSpec((1,), [dense(1, bias=False), relu(), dense(1, bias=False)])
        params = build_network(spec, 0)
        params.tensors[0]["weight"][:] = -1.0
        scores = saliency(params, None, x=np.array([[1.0]]))
        assert scores.scores[0].tolist() == [[0.0]] and scores.scores[2].tolist() == [[0.0]]

    def test_param_saliency_includes_biases(self, rng):
        params = build_network(mlp([3, 2]), 0)
        params.tensors[0]["bias"][:] = 0.5
        _, grads = loss_and_grad(params, None, (rng.standard_normal((4, 3)), np.array([0, 1, 0, 1])), mode="eval")
        sal = param_saliency(params, grads)
        np.testing.assert_array_equal(sal[0]["bias"], grads.grads[0]["bias"] * 0.5)


class TestScoreMap:
    def test_masked_positions_absent(self):
        params = linear_net([[[1.0, 2.0, 3.0]]])
        mask = {0: np.array([[1.0, 0.0, 1.0]])}
        scores = score_magnitude(params, mask)
        assert scores.present(0).tolist() == [1.0, 3.0]
        assert scores.count() == 2

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            ScoreMap({0: np.array([np.nan])}, {0: np.ones(1)})


class TestRandomAndMagnitude:
    def test_random_deterministic(self):
        params = build_network(mlp([5, 4]), 0)
        a, b = score_random(params, None, 7), score_random(params, None, 7)
        assert np.array_equal(a.scores[0], b.scores[0])

    def test_random_mean(self):
        params = build_network(mlp([100, 100], bias=False), 0)
        assert abs(score_random(params, None, 3).scores[0].mean()) < 0.05

    def test_magnitude_values(self):
        params = linear_net([[[-3.0, 0.0]]])
        assert score_magnitude(params, None).scores[0].tolist() == [[3.0, 0.0]]

    def test_magnitude_half_normal_mean(self):
        params = build_network(mlp([50, 400], bias=False), 1)
        sigma = np.sqrt(2 / 50)
        assert score_magnitude(params, None).scores[0].mean() == pytest.approx(sigma * np.sqrt(2 / np.pi), rel=0.03)


class TestSnip:
    def test_abs_product(self):
        """theta = 2 with accumulated gradient -1.5 gives 3."""
        params = linear_net([[[2.0]]])
        # mse on y = 2x, x = 1, target 3.5: dL/dw = (2 - 3.5) * 1 = -1.5
        scores = score_snip(params, None, (np.array([[1.0]]), np.array([3.5])), loss="mse")
        assert scores.scores[0].tolist() == [[3.0]]

    def test_zero_gradient(self):
        params = linear_net([[[2.0, 1.0]]])
        scores = score_snip(params, None, (np.array([[0.0, 1.0]]), np.array([0.0])), loss="mse")
        assert scores.scores[0][0, 0] == 0.0

    def test_sub_batch_linearity(self, rng):
        params = build_network(mlp([4, 6, 3]), 2)
        batch = (rng.standard_normal((8, 4)), rng.integers(0, 3, 8))
        whole = score_snip(params, None, batch)
        split = score_snip(params, None, batch, batch_size=4)
        for i in whole.layers:
            np.testing.assert_allclose(split.scores[i], whole.scores[i], rtol=1e-12, atol=1e-15)


class TestGrasp:
    def test_sub_batch_linearity(self, rng):
        params = build_network(mlp([4, 6, 3]), 2)
        batch = (rng.standard_normal((8, 4)), rng.integers(0, 3, 8))
        whole = score_grasp(params, None, batch)
        split = score_grasp(params, None, batch, batch_size=4)
        for i in whole.layers:
            np.testing.assert_allclose(split.scores[i], whole.scores[i], rtol=1e-5, atol=1e-9)

    def test_quadratic(self):
        """0.5 t^T diag(2, 4) t at t = [1, 1]: g = [2, 4], Hg = [4, 16], S = -[4, 16]."""
        params = linear_net([[[1.0, 1.0]]])
        # mse mean over two samples is 0.25 * sum (t.x)^2, so these inputs give 0.5 (2 t1^2 + 4 t2^2)
        x = np.array([[2.0, 0.0], [0.0, 2.0 * np.sqrt(2.0)]])
        scores = score_grasp(params, None, (x, np.zeros(2)), loss="mse", mode="eval")
        np.testing.assert_allclose(scores.scores[0], [[-4.0, -16.0]], rtol=1e-8)

    def test_critical_point(self):
        params = linear_net([[[1.0, 1.0]]])
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        scores = score_grasp(params, None, (x, np.array([1.0, 1.0])), loss="mse", mode="eval")
        np.testing.assert_allclose(scores.scores[0], 0.0, atol=1e-12)

    def test_can_be_negative_and_positive(self, rng):
        params = build_network(mlp([4, 8, 3]), 1)
        scores = score_grasp(params, None, (rng.standard_normal((12, 4)), rng.integers(0, 3, 12)))
        flat = np.concatenate([scores.scores[i].ravel() for i in scores.layers])
        assert flat.min() < 0 < flat.max()


class TestSynflow:
    def test_hand_example(self):
        params = linear_net(HAND_NET)
        r, _, _ = synflow_flow(params, None)
        assert r == 10.0
        scores = score_synflow(params, None)
        assert sorted(scores.scores[0].ravel().tolist()) == [1.0, 2.0, 3.0, 4.0]
        assert sorted(scores.scores[1].ravel().tolist()) == [3.0, 7.0]
        assert scores.layer_totals() == {0: 10.0, 1: 10.0}

    def test_sign_ignored(self):
        params = linear_net([[[-5.0]]])
        assert score_synflow(params, None).scores[0].tolist() == [[5.0]]

    def test_closed_form_hand(self):
        scores = synflow_closed_form(linear_net(HAND_NET), None)
        assert scores.scores[0].tolist() == [[1.0, 2.0], [3.0, 4.0]]
        assert scores.scores[1].tolist() == [[3.0, 7.0]]

    def test_closed_form_single_layer(self, rng):
        w = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(synflow_closed_form(linear_net([w]), None).scores[0], np.abs(w))

    def test_closed_form_matches_three_layers(self, rng):
        params = linear_net([rng.standard_normal((5, 4)), rng.standard_normal((6, 5)), rng.standard_normal((2, 6))])
        a, b = score_synflow(params, None), synflow_closed_form(params, None)
        for i in a.layers:
            np.testing.assert_allclose(a.scores[i], b.scores[i], rtol=1e-10)

    def test_closed_form_rejects_bias(self):
        with pytest.raises(StructureError, match="bias"):
            synflow_closed_form(build_network(mlp([3, 2], bias=True), 0), None)

    def test_masked_positions_absent(self):
        params = linear_net(HAND_NET)
        mask = ones_mask(params)
        mask[0][0, 0] = 0
        scores = score_synflow(params, mask)
        assert scores.present(0).size == 3
        assert scores.scores[0][0, 0] == 0

    def test_data_free_and_positive(self):
        params = build_network(toy_conv(bias=True), 3)
        scores = score_synflow(params, None)
        for i in scores.layers:
            assert np.all(scores.scores[i] > 0)

    def test_rescaling_preserves_ranking(self):
        params = linear_net([[[1e200, 2e200]], [[3e200]]])
        scores = score_synflow(params, None)
        ref = synflow_closed_form(linear_net([[[1.0, 2.0]], [[3.0]]]), None)
        for i in scores.layers:
            assert np.array_equal(np.argsort(scores.scores[i].ravel()), np.argsort(ref.scores[i].ravel()))

    def test_rescale_layers_scales_output(self, rng):
        params = build_network(mlp([3, 4, 2], bias=True), 0)
        for _, name, arr in params.items():
            if name == "bias":
                arr[...] = np.abs(rng.standard_normal(arr.shape))
        a = absolute(params)
        r1, _, _ = synflow_flow(a, None)
        r2, _ = _synflow_objective(rescale_layers(a), ones_mask(a), "eval")
        c = np.prod([1 / np.max(a.tensors[i]["weight"]) for i in a.spec.prunable_layers])
        assert r2 == pytest.approx(r1 * c, rel=1e-12)

    def test_unrecoverable_overflow_raises(self):
        params = linear_net([[[np.inf]]])
        with pytest.raises(NumericError, match="rescale"):
            score_synflow(params, None)

    def test_eval_mode_batchnorm_positive(self):
        spec = NetworkSpec((3,), [dense(4), batchnorm(), relu(), dense(2)])
        params = build_network(spec, 0)
        scores = score_synflow(params, None)
        assert all(np.all(scores.scores[i] > 0) for i in scores.layers)


class TestScoringContext:
    def test_data_requirements(self):
        with pytest.raises(ValueError, match="batch"):
            ScoringContext("snip")
        with pytest.raises(ValueError, match="data-free"):
            ScoringContext("synflow", batch=(np.zeros((1, 2)), np.zeros(1)))
        with pytest.raises(ValueError, match="unknown"):
            ScoringContext("hessian")

    def test_default_modes(self):
        assert ScoringContext("synflow").mode == "eval"
        assert ScoringContext("snip", batch=(np.zeros((1, 2)), np.zeros(1))).mode == "train"

    def test_dispatch_and_call_count(self):
        params = linear_net(HAND_NET)
        ctx = ScoringContext("synflow")
        scores = ctx(params, ones_mask(params))
        assert ctx.calls == 1
        assert scores.layer_totals() == {0: 10.0, 1: 10.0}
