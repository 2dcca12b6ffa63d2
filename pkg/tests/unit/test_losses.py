"""
Unit tests for losses module
Tests focal, detection and topology losses and the per-mode criterion
"""

import pytest
import numpy as np
import os

# Import the modules to test
import sys
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from assignment import hungarian, match_lanes, match_traffic
from config import BevConfig, DecoderConfig, GeneratorConfig, LossWeights
from decoder import LaneDecoder, Predictions
from errors import DimensionError, EmptyMaskWarning
from geometry import BBox2D, BevWindow, Polyline3D
from losses import (Criterion, LossBreakdown, detection_loss, focal_loss, lane_detection_terms, topo_loss_o2m,
                    topo_loss_o2o, total_loss)
from numerics import TensorNode, backward
from scene import SceneGraph, TrafficElement, encode_traffic, generate, rasterize
from supervision import SupervisionTarget, project_o2o


def _scene():
    first = Polyline3D(np.column_stack([np.linspace(0.0, 10.0, 4), np.zeros(4), np.zeros(4)]))
    second = Polyline3D(np.column_stack([np.linspace(10.0, 20.0, 4), np.zeros(4), np.zeros(4)]))
    light = TrafficElement(BBox2D(0.4, 0.3, 0.5, 0.4), 2)
    return SceneGraph(lanes=[first, second], traffic=[light],
                      g_ll=np.array([[0, 1], [0, 0]]), g_lt=np.array([[1], [0]]))


def _perfect_predictions(scene, n_lanes=4, n_traffic=3, confidence=30.0):
    """Predictions whose first queries reproduce the ground truth exactly"""
    window = BevWindow()
    points = np.zeros((n_lanes, 4, 3))
    points[:scene.n_lanes] = window.normalize(scene.lane_array())
    logits = np.full(n_lanes, -confidence)
    logits[:scene.n_lanes] = confidence
    t_logits = np.full((n_traffic, 13), -confidence)
    t_logits[0, scene.traffic_attrs()[0]] = confidence
    boxes = np.tile([0.0, 0.0, 0.05, 0.05], (n_traffic, 1))
    boxes[0] = scene.traffic_boxes()[0]
    return Predictions(lane_logits=TensorNode(logits, requires_grad=True),
                       lane_points_norm=TensorNode(points, requires_grad=True),
                       traffic_logits=TensorNode(t_logits, requires_grad=True),
                       traffic_boxes=TensorNode(boxes, requires_grad=True),
                       topo_ll=TensorNode(np.zeros((n_lanes, n_lanes)), requires_grad=True),
                       topo_lt=TensorNode(np.zeros((n_lanes, n_traffic)), requires_grad=True),
                       window=window)


@pytest.mark.unit
class TestMatching:
    """Test lane and traffic matching on prediction sets"""

    def setup_method(self):
        """Set up test fixtures"""
        self.scene = _scene()
        self.preds = _perfect_predictions(self.scene)

    def test_one_to_one_recovers_ground_truth(self):
        """Test exact predictions are matched to their own ground truth"""
        assert match_lanes(self.preds, self.scene).sets == [(0,), (1,)]
        assert match_traffic(self.preds, self.scene).sets == [(0,)]

    def test_one_to_many(self):
        """Test K distinct predictions per lane"""
        result = match_lanes(self.preds, self.scene, k=2)

        assert result.mode == "o2m"
        assert [len(s) for s in result.sets] == [2, 2]
        assert sorted(result.positives().tolist()) == [0, 1, 2, 3]


@pytest.mark.unit
class TestFocalLoss:
    """Test the sigmoid focal loss"""

    def test_reference_value(self):
        """Test target 1 at p = 0.5"""
        loss = focal_loss(TensorNode(np.array([0.0])), np.array([1]))

        assert loss.item() == pytest.approx(0.25 * 0.25 * np.log(2.0), abs=1e-9)
        assert loss.item() == pytest.approx(0.043321, abs=1e-6)

    def test_confident_correct_is_near_zero(self):
        """Test perfect predictions cost nothing"""
        loss = focal_loss(TensorNode(np.array([40.0, -40.0])), np.array([1, 0]))

        assert loss.item() < 1e-12

    def test_reduces_to_half_bce(self):
        """Test gamma = 0, alpha = 0.5 gives half the binary cross-entropy"""
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 4)) * 3
        t = (rng.random((5, 4)) < 0.5).astype(int)
        p = 1.0 / (1.0 + np.exp(-x))
        bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()

        loss = focal_loss(TensorNode(x), t, alpha=0.5, gamma=0.0)

        assert loss.item() == pytest.approx(0.5 * bce, abs=1e-10)

    def test_mask_restricts_average(self):
        """Test only masked entries contribute"""
        x = TensorNode(np.array([0.0, 100.0]))
        mask = np.array([True, False])

        assert focal_loss(x, np.array([1, 0]), mask=mask).item() == pytest.approx(0.25 * 0.25 * np.log(2.0))

    def test_empty_mask_warns(self):
        """Test an empty mask returns 0 with a warning"""
        with pytest.warns(EmptyMaskWarning):
            loss = focal_loss(TensorNode(np.zeros(3)), np.zeros(3), mask=np.zeros(3, dtype=bool))

        assert loss.item() == 0.0

    def test_gradient_matches_finite_difference(self):
        """Test the analytic gradient"""
        x0 = np.array([-1.5, 0.3, 2.0, -0.2])
        t = np.array([1, 0, 1, 0])
        x = TensorNode(x0.copy(), requires_grad=True)
        backward(focal_loss(x, t))
        eps = 1e-6

        for i in range(4):
            up, down = x0.copy(), x0.copy()
            up[i] += eps
            down[i] -= eps
            numeric = (focal_loss(TensorNode(up), t).item() - focal_loss(TensorNode(down), t).item()) / (2 * eps)
            assert x.grad[i] == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    def test_shape_mismatch(self):
        """Test targets must match logits"""
        with pytest.raises(DimensionError):
            focal_loss(TensorNode(np.zeros(3)), np.zeros(4))


@pytest.mark.unit
class TestDetectionLoss:
    """Test lane and traffic detection terms"""

    def setup_method(self):
        """Set up test fixtures"""
        self.scene = _scene()
        self.sigma = hungarian(np.array([[0.0, 1.0, 1.0, 1.0], [1.0, 0.0, 1.0, 1.0]]))
        self.sigma_t = hungarian(np.array([[0.0, 1.0, 1.0]]))

    def test_perfect_predictions(self):
        """Test matched exact predictions with saturated logits"""
        preds = _perfect_predictions(self.scene)

        loss = detection_loss(preds, self.scene, self.sigma, self.sigma_t)

        assert loss.item() < 1e-3

    def test_lane_weight_is_linear(self):
        """Test doubling lambda_l adds the lane term once more"""
        preds = _perfect_predictions(self.scene, confidence=0.5)
        base = detection_loss(preds, self.scene, self.sigma, self.sigma_t, LossWeights()).item()
        doubled = detection_loss(preds, self.scene, self.sigma, self.sigma_t, LossWeights(lambda_l=2.0)).item()
        cls, reg = lane_detection_terms(preds, self.scene, self.sigma, LossWeights())

        assert doubled - base == pytest.approx(cls.item() + reg.item())

    def test_regression_offset(self):
        """Test the L1 term averages over matched coordinates"""
        preds = _perfect_predictions(self.scene)
        preds.lane_points_norm.values[:2] += 0.1

        _, reg = lane_detection_terms(preds, self.scene, self.sigma, LossWeights())

        assert reg.item() == pytest.approx(0.1)

    def test_gradients_reach_heads(self):
        """Test backward populates lane and traffic gradients"""
        preds = _perfect_predictions(self.scene, confidence=0.5)
        preds.traffic_boxes.values[0] += 0.01

        backward(detection_loss(preds, self.scene, self.sigma, self.sigma_t))

        assert np.any(preds.lane_logits.grad != 0)
        assert np.any(preds.traffic_boxes.grad != 0)


@pytest.mark.unit
class TestTopologyLoss:
    """Test one-to-one and one-to-many topology terms"""

    def setup_method(self):
        """Set up test fixtures"""
        self.scene = _scene()
        self.ll = project_o2o(self.scene.g_ll, [0, 1], 4, 4)
        self.lt = project_o2o(self.scene.g_lt, [0, 1], 4, 3, col_sigma=[0])

    def test_saturated_logits_give_zero(self):
        """Test logits agreeing with every supervised target"""
        preds = _perfect_predictions(self.scene)
        preds.topo_ll.values[:] = np.where(self.ll.z == 1, 50.0, -50.0)
        preds.topo_lt.values[:] = np.where(self.lt.z == 1, 50.0, -50.0)

        assert topo_loss_o2o(preds, self.ll, self.lt).item() == pytest.approx(0.0, abs=1e-12)

    def test_full_and_valid_only_differ(self):
        """Test the regime changes the loss"""
        preds = _perfect_predictions(self.scene)
        preds.topo_ll.values[:] = np.random.default_rng(1).normal(size=(4, 4))
        full = project_o2o(self.scene.g_ll, [0, 1], 4, 4, regime="full")

        assert topo_loss_o2o(preds, full, self.lt).item() != pytest.approx(
            topo_loss_o2o(preds, self.ll, self.lt).item())

    def test_weights_scale_terms(self):
        """Test lambda_ll scales the lane-lane term"""
        preds = _perfect_predictions(self.scene)
        only_ll = topo_loss_o2o(preds, self.ll, self.lt, LossWeights(lambda_lt=0.0)).item()
        doubled = topo_loss_o2o(preds, self.ll, self.lt, LossWeights(lambda_ll=10.0, lambda_lt=0.0)).item()

        assert doubled == pytest.approx(2.0 * only_ll)

    def test_o2m_zero_taps(self):
        """Test no taps contribute nothing"""
        assert topo_loss_o2m([], []).item() == 0.0

    def test_o2m_identical_taps_add(self):
        """Test two identical taps give twice the single-tap loss"""
        preds = _perfect_predictions(self.scene)
        single = topo_loss_o2o(preds, self.ll, self.lt).item()

        assert topo_loss_o2m([preds, preds], [(self.ll, self.lt)] * 2).item() == pytest.approx(2.0 * single)
        assert topo_loss_o2m([preds], [(self.ll, self.lt)]).item() == pytest.approx(single)
        assert topo_loss_o2m([preds, preds], [(self.ll, self.lt)] * 2, reduction="mean").item() == \
            pytest.approx(single)

    def test_o2m_length_mismatch(self):
        """Test one target per tap"""
        with pytest.raises(DimensionError):
            topo_loss_o2m([_perfect_predictions(self.scene)], [])

    def test_empty_lane_traffic_side(self):
        """Test zero traffic predictions skip the LT term"""
        preds = _perfect_predictions(self.scene)
        preds.topo_lt = TensorNode(np.zeros((4, 0)))
        lt = SupervisionTarget(z=np.zeros((4, 0), dtype=np.int8), valid=np.zeros((4, 0), dtype=bool))

        assert topo_loss_o2o(preds, self.ll, lt).item() == pytest.approx(
            topo_loss_o2o(preds, self.ll, self.lt, LossWeights(lambda_lt=0.0)).item())

    def test_total_is_linear_in_lambda(self):
        """Test total = detection + o2o + lambda_o2m * o2m"""
        det, o2o, o2m = (TensorNode(np.array(v)) for v in (1.25, 0.5, 0.75))

        assert total_loss(det, o2o, o2m).item() == pytest.approx(1.25 + 0.5 + 2.0 * 0.75, abs=1e-12)
        assert total_loss(det, o2o, o2m, LossWeights(lambda_o2m=0.0)).item() == pytest.approx(1.75, abs=1e-12)


@pytest.mark.unit
class TestCriterion:
    """Test the objective assembled for each decoder mode"""

    def setup_method(self):
        """Set up test fixtures"""
        self.scene = generate(GeneratorConfig(lane_max=4, traffic_max=3), 0)
        self.bev = rasterize(self.scene, BevConfig(height=10, width=5))

    def _forward(self, mode, **overrides):
        settings = dict(layers=2, queries=12, traffic_queries=4, traffic_layers=1, channels=16, heads=2,
                        parallel_blocks=2, groups=2, bev_height=10, bev_width=5, precision="float64", mode=mode)
        settings.update(overrides)
        decoder = LaneDecoder(DecoderConfig(**settings), seed=0)
        output, preds = decoder.forward(self.bev, encode_traffic(self.scene, decoder.params), training=True)
        return decoder, output, preds

    def _run(self, mode, k=2, weights=None, **overrides):
        decoder, output, preds = self._forward(mode, **overrides)
        criterion = Criterion(weights, mode=mode, k=k)
        total, breakdown = criterion(output, preds, self.scene)
        return decoder, total, breakdown

    def test_standard_has_no_auxiliary_term(self):
        """Test standard mode"""
        _, total, breakdown = self._run("standard")

        assert breakdown.topo_o2m == 0.0
        assert breakdown.aux_sets == 0
        assert breakdown.total == pytest.approx(breakdown.detection + breakdown.topo_o2o)
        assert total.item() == pytest.approx(breakdown.total)

    def test_reordered_counts_valid_entries(self):
        """Test each tap supervises (K * N_L)^2 lane-lane entries"""
        _, _, breakdown = self._run("reordered", k=2)

        assert breakdown.aux_sets == 2 * 2
        assert breakdown.valid_ll_o2m == 4 * (2 * self.scene.n_lanes) ** 2
        assert breakdown.topo_o2m > 0.0

    def test_total_combines_terms(self):
        """Test the auxiliary weight"""
        _, _, breakdown = self._run("reordered", k=2)

        assert breakdown.total == pytest.approx(
            breakdown.detection + breakdown.topo_o2o + 2.0 * breakdown.topo_o2m)

    def test_zero_auxiliary_weight(self):
        """Test lambda_o2m = 0 leaves the one-to-one objective"""
        _, _, breakdown = self._run("reordered", k=1, weights=LossWeights(lambda_o2m=0.0), parallel_blocks=1)

        assert breakdown.total == pytest.approx(breakdown.detection + breakdown.topo_o2o)

    def test_single_block_single_positive_matches_baseline(self):
        """Test M = 1, K = 1 and lambda_o2m = 0 give the one-to-one objective on the same outputs"""
        _, output, preds = self._forward("reordered", parallel_blocks=1)
        weights = LossWeights(lambda_o2m=0.0)

        reordered, breakdown = Criterion(weights, mode="reordered", k=1)(output, preds, self.scene)
        baseline, _ = Criterion(weights, mode="standard", k=1)(output, preds, self.scene)

        assert breakdown.aux_sets == 2
        assert reordered.item() == baseline.item()

    def test_naive_supervises_layer_outputs(self):
        """Test naive one-to-many uses every layer output"""
        _, _, breakdown = self._run("naive_o2m", k=2)

        assert breakdown.aux_sets == 2
        assert breakdown.valid_ll_o2m == 2 * (2 * self.scene.n_lanes) ** 2

    def test_group_mode_auxiliary_groups(self):
        """Test extra groups are supervised one-to-one at every layer"""
        _, _, breakdown = self._run("group_o2m", queries=16)

        assert breakdown.aux_sets == 1 * 2
        assert breakdown.topo_o2m > 0.0

    def test_gradients_flow_to_every_part(self):
        """Test the backward pass reaches heads and parallel blocks"""
        decoder, total, _ = self._run("reordered", k=2)

        backward(total)

        for name in ("lane_head.cls.weight", "topo_ll.out.weight", "topo_lt.out.weight",
                     "layers.0.ca.1.attn.q.weight", "traffic_head.box.fc2.weight"):
            assert decoder.params[name].grad is not None
            assert np.any(decoder.params[name].grad != 0), name

    def test_breakdown_mean(self):
        """Test averaging per-scene breakdowns"""
        mean = LossBreakdown.mean([LossBreakdown(total=1.0, valid_ll_o2m=4), LossBreakdown(total=3.0, valid_ll_o2m=4)])

        assert mean.total == pytest.approx(2.0)
        assert mean.valid_ll_o2m == 8
