import numpy as np
import pytest

from pnpfusion import autodiff as ad
from pnpfusion import heads as hd
from pnpfusion.autodiff import FfnParams, Value
from pnpfusion.geometry import denormalize_ref


def make_params(rng, embed_dim=8):
    return hd.HeadParams.create(rng, embed_dim)


class TestDecodeDetection:
    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(0)
        params = make_params(rng)
        probs, _ = hd.decode_detection(
            Value(rng.normal(size=(6, 8))), Value(rng.uniform(0.2, 0.8, (6, 3))), params
        )
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_box_head_returns_reference_center(self):
        rng = np.random.default_rng(1)
        params = make_params(rng)
        params.box_head = FfnParams.create((8, 16, hd.BOX_DIM), rng, zero=True)
        refs = np.array([[0.3, 0.6, 0.5], [0.7, 0.2, 0.4]])
        _, boxes = hd.decode_detection(Value(rng.normal(size=(2, 8))), Value(refs), params)
        np.testing.assert_allclose(boxes.data[:, :3], denormalize_ref(refs), atol=1e-9)

    def test_sizes_strictly_positive(self):
        rng = np.random.default_rng(2)
        params = make_params(rng)
        for w in params.box_head.weights:
            w.data[:] = rng.normal(size=w.data.shape) * 3.0
        _, boxes = hd.decode_detection(
            Value(rng.normal(size=(10, 8))), Value(rng.uniform(0.1, 0.9, (10, 3))), params
        )
        assert np.all(boxes.data[:, 3:6] > 0)


class TestDecodeTrajectories:
    def test_zero_decoder_stays_at_center(self):
        rng = np.random.default_rng(3)
        params = make_params(rng)
        params.traj_head = FfnParams.create(
            (8, 16, hd.N_HYPOTHESES * hd.HORIZON * 2), rng, zero=True
        )
        centers = Value(np.array([[3.0, -2.0], [10.0, 5.0]]))
        traj = hd.decode_trajectories(Value(rng.normal(size=(2, 8))), centers, params)
        for i in range(2):
            np.testing.assert_allclose(
                traj.data[i], np.tile(centers.data[i], (hd.N_HYPOTHESES, hd.HORIZON, 1))
            )

    def test_output_shape_is_6x12x2(self):
        rng = np.random.default_rng(4)
        params = make_params(rng)
        traj = hd.decode_trajectories(
            Value(rng.normal(size=(3, 8))), Value(rng.normal(size=(3, 2))), params
        )
        assert traj.shape == (3, 6, 12, 2)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        params = make_params(rng)
        q = Value(rng.normal(size=(2, 8)))
        c = Value(rng.normal(size=(2, 2)))
        a = hd.decode_trajectories(q, c, params)
        b = hd.decode_trajectories(q, c, params)
        np.testing.assert_array_equal(a.data, b.data)

    def test_cumulative_displacements(self):
        rng = np.random.default_rng(6)
        params = make_params(rng)
        q = Value(rng.normal(size=(1, 8)))
        c = Value(np.zeros((1, 2)))
        traj = hd.decode_trajectories(q, c, params)
        disp = ad.ffn_apply(q, params.traj_head).data.reshape(1, 6, 12, 2)
        np.testing.assert_allclose(traj.data, np.cumsum(disp, axis=2), atol=1e-12)


class TestSelectHypothesis:
    def test_exact_hypothesis_wins(self):
        rng = np.random.default_rng(7)
        gt = rng.normal(size=(12, 2))
        trajs = rng.normal(size=(6, 12, 2))
        trajs[4] = gt
        assert hd.select_hypothesis(trajs, gt) == 4

    def test_tie_breaks_to_lower_index(self):
        gt = np.zeros((12, 2))
        trajs = np.ones((6, 12, 2))
        trajs[2] = 0.5
        trajs[5] = 0.5
        assert hd.select_hypothesis(trajs, gt) == 2

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            gt = rng.normal(size=(12, 2))
            trajs = rng.normal(size=(6, 12, 2))
            best = min(
                range(6), key=lambda k: np.linalg.norm(trajs[k] - gt, axis=-1).sum()
            )
            assert hd.select_hypothesis(trajs, gt) == best

    def test_no_valid_steps_is_an_error(self):
        with pytest.raises(ValueError):
            hd.select_hypothesis(np.zeros((6, 12, 2)), np.zeros((12, 2)), np.zeros(12, bool))

    def test_respects_validity_mask(self):
        gt = np.zeros((12, 2))
        trajs = np.zeros((6, 12, 2))
        trajs[0, 6:] = 100.0  # bad only in the invalid tail
        trajs[1:] = 1.0
        valid = np.arange(12) < 6
        assert hd.select_hypothesis(trajs, gt, valid) == 0


class TestLosses:
    def perfect_setup(self, rng):
        """One matched agent predicted exactly, one unmatched query sure of empty."""
        probs = np.full((2, hd.N_CLASSES), 1e-12)
        probs[0, 2] = 1.0
        probs[1, hd.EMPTY_CLASS] = 1.0
        probs /= probs.sum(axis=1, keepdims=True)
        gt_box = hd.gt_box_vector([1.0, 2.0, 0.8], [4.5, 1.9, 1.6], 0.4)
        boxes = np.stack([gt_box, rng.normal(size=8)])
        future = rng.normal(size=(hd.HORIZON, 2))
        trajs = rng.normal(size=(2, hd.N_HYPOTHESES, hd.HORIZON, 2))
        trajs[0, 3] = future
        targets = hd.FrameTargets(
            class_ids=np.array([2, hd.EMPTY_CLASS]),
            matched_rows=np.array([0]),
            gt_boxes=gt_box[None],
            gt_futures=[future],
            future_valid=[np.ones(hd.HORIZON, bool)],
        )
        return Value(probs), Value(boxes), Value(trajs), targets

    def test_perfect_prediction_gives_zero_loss(self):
        rng = np.random.default_rng(9)
        probs, boxes, trajs, targets = self.perfect_setup(rng)
        losses = hd.compute_losses(probs, boxes, trajs, targets)
        assert losses["total"].item() == pytest.approx(0.0, abs=1e-9)

    def test_confident_empty_unmatched_contributes_nothing(self):
        rng = np.random.default_rng(10)
        probs, boxes, trajs, targets = self.perfect_setup(rng)
        losses = hd.compute_losses(probs, boxes, trajs, targets)
        assert losses["cls"].item() == pytest.approx(0.0, abs=1e-9)

    def test_constant_half_meter_offset_sums_to_six(self):
        rng = np.random.default_rng(11)
        probs, boxes, trajs, targets = self.perfect_setup(rng)
        shifted = trajs.data.copy()
        shifted[0, 3, :, 0] += 0.5  # the winning hypothesis, x only, all 12 steps
        losses = hd.compute_losses(probs, boxes, Value(shifted), targets)
        assert losses["trajectory"].item() == pytest.approx(6.0, abs=1e-9)

    def test_winner_take_all_gradient(self):
        rng = np.random.default_rng(12)
        probs, boxes, _, targets = self.perfect_setup(rng)
        trajs = Value(rng.normal(size=(2, hd.N_HYPOTHESES, hd.HORIZON, 2)), requires_grad=True)
        k_hat = hd.select_hypothesis(trajs.data[0], targets.gt_futures[0])
        losses = hd.compute_losses(probs, boxes, trajs, targets)
        losses["trajectory"].backward()
        grad = trajs.grad
        for k in range(hd.N_HYPOTHESES):
            if k == k_hat:
                assert np.any(grad[0, k] != 0)
            else:
                assert np.all(grad[0, k] == 0)
        assert np.all(grad[1] == 0)  # unmatched query gets no trajectory gradient

    def test_loss_nonnegative_random_inputs(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            probs = rng.dirichlet(np.ones(hd.N_CLASSES), size=3)
            boxes = rng.normal(size=(3, 8))
            trajs = rng.normal(size=(3, hd.N_HYPOTHESES, hd.HORIZON, 2))
            future = rng.normal(size=(hd.HORIZON, 2))
            targets = hd.FrameTargets(
                class_ids=np.array([1, hd.EMPTY_CLASS, hd.EMPTY_CLASS]),
                matched_rows=np.array([0]),
                gt_boxes=rng.normal(size=(1, 8)),
                gt_futures=[future],
                future_valid=[np.ones(hd.HORIZON, bool)],
            )
            losses = hd.compute_losses(Value(probs), Value(boxes), Value(trajs), targets)
            assert losses["total"].item() >= 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(14)
        params = make_params(rng)
        queries = Value(rng.normal(size=(4, 8)), requires_grad=True)
        refs = Value(rng.uniform(0.3, 0.7, (4, 3)))
        future = rng.normal(size=(hd.HORIZON, 2)) * 2.0
        gt_box = hd.gt_box_vector([5.0, -3.0, 0.8], [4.4, 1.8, 1.5], 0.7)
        targets = hd.FrameTargets(
            class_ids=np.array([0, 3, hd.EMPTY_CLASS, hd.EMPTY_CLASS]),
            matched_rows=np.array([0, 1]),
            gt_boxes=np.stack([gt_box, gt_box]),
            gt_futures=[future, future + 1.0],
            future_valid=[np.ones(hd.HORIZON, bool)] * 2,
        )
        inputs = {"queries": queries}
        inputs.update(params.parameters())

        def fn(**kw):
            probs, boxes = hd.decode_detection(kw["queries"], refs, params)
            centers = boxes[:, 0:2]
            trajs = hd.decode_trajectories(kw["queries"], centers, params)
            return hd.compute_losses(probs, boxes, trajs, targets)["total"]

        report = ad.grad_check(fn, inputs, tol=1e-4)
        assert report.ok, report.summary()
