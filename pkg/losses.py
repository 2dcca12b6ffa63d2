"""
Losses for LaneTopoLab
Focal classification, L1 / GIoU regression and topology losses, and the
criterion that assembles the training objective for every decoder mode:

    total = detection + topology_o2o + lambda_o2m * topology_o2m
"""

import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from assignment import AssignmentResult, lane_cost, match_lanes, match_traffic, one_to_many
from config import LossWeights
from errors import ConfigurationError, DimensionError, EmptyMaskWarning
from geometry import BevWindow, giou_loss
from numerics import TensorNode, abs_, add, getitem, make_node, mul, sub, sum_
from supervision import SupervisionTarget, build_targets, count_valid

logger = logging.getLogger(__name__)


def _zero(dtype=np.float64) -> TensorNode:
    return TensorNode(np.zeros((), dtype=dtype))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def focal_loss(logits: TensorNode, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0,
               mask: Optional[np.ndarray] = None, reduction: str = "mean") -> TensorNode:
    """
    Sigmoid focal loss -alpha_t (1 - p_t)^gamma log(p_t) over masked entries.

    reduction="mean" averages over the mask, "sum" adds. An empty mask
    returns 0 and emits EmptyMaskWarning.
    """
    x = logits.values
    t = np.asarray(targets)
    if t.shape != x.shape:
        raise DimensionError(f"focal targets shape {list(t.shape)} != logits {list(x.shape)}")
    if reduction not in ("mean", "sum"):
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    m = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(np.count_nonzero(m))
    if count == 0:
        warnings.warn(f"focal loss over an empty mask of shape {list(x.shape)}; returning 0",
                      EmptyMaskWarning, stacklevel=2)
        return _zero(logits.dtype)

    pos = t.astype(bool)
    p = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    nll_pos = _softplus(-x)
    nll_neg = _softplus(x)
    w_pos = alpha * (1.0 - p) ** gamma
    w_neg = (1.0 - alpha) * p ** gamma
    elem = np.where(pos, w_pos * nll_pos, w_neg * nll_neg)
    d_elem = np.where(pos, w_pos * (-gamma * p * nll_pos - (1.0 - p)),
                      w_neg * (gamma * (1.0 - p) * nll_neg + p))
    scale = 1.0 / count if reduction == "mean" else 1.0
    value = np.asarray((elem * m).sum() * scale, dtype=x.dtype)
    grad = (d_elem * m * scale).astype(x.dtype)
    return make_node(value, (logits,), lambda g: (g * grad,))


def l1_loss(pred: TensorNode, target: np.ndarray) -> TensorNode:
    """Sum of absolute differences"""
    return sum_(abs_(sub(pred, np.asarray(target, dtype=pred.dtype))))


@dataclass
class LossBreakdown:
    """Per-term values of one scene's objective"""
    total: float = 0.0
    detection: float = 0.0
    lane_cls: float = 0.0
    lane_reg: float = 0.0
    traffic_cls: float = 0.0
    traffic_reg: float = 0.0
    traffic_giou: float = 0.0
    topo_ll: float = 0.0
    topo_lt: float = 0.0
    topo_o2o: float = 0.0
    topo_o2m: float = 0.0
    valid_ll_o2m: int = 0
    aux_sets: int = 0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    @staticmethod
    def mean(items: Sequence["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return LossBreakdown()
        out = {}
        for key, value in asdict(items[0]).items():
            values = [getattr(item, key) for item in items]
            out[key] = int(sum(values)) if isinstance(value, int) else float(np.mean(values))
        return LossBreakdown(**out)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def lane_detection_terms(preds, scene, sigma: AssignmentResult, weights: LossWeights,
                         window: Optional[BevWindow] = None) -> Tuple[TensorNode, TensorNode]:
    """(classification, regression) lane terms, each normalized by the positive count"""
    window = window or preds.window
    positives = sigma.positives()
    n_pos = max(1, len(positives))
    target = np.zeros(preds.n_lanes)
    target[positives] = 1.0
    cls = mul(focal_loss(preds.lane_logits, target, weights.focal_alpha, weights.focal_gamma,
                         reduction="sum"), 1.0 / n_pos)
    if scene.n_lanes == 0:
        return cls, _zero(preds.lane_logits.dtype)
    gt_idx, pred_idx = sigma.pairs()
    gt_points = window.normalize(scene.lane_array())[gt_idx]
    matched = getitem(preds.lane_points_norm, pred_idx)
    reg = mul(l1_loss(matched, gt_points), 1.0 / (n_pos * gt_points[0].size))
    return cls, reg


def traffic_detection_terms(preds, scene, sigma_t: AssignmentResult,
                            weights: LossWeights) -> Tuple[TensorNode, TensorNode, TensorNode]:
    """(classification, L1, GIoU) traffic terms normalized by max(1, N_T)"""
    dtype = preds.traffic_logits.dtype
    n_queries, classes = preds.traffic_logits.shape
    if n_queries == 0:
        return _zero(dtype), _zero(dtype), _zero(dtype)
    n_gt = max(1, scene.n_traffic)
    target = np.zeros((n_queries, classes))
    gt_idx, pred_idx = sigma_t.pairs()
    if len(gt_idx):
        target[pred_idx, scene.traffic_attrs()[gt_idx]] = 1.0
    cls = mul(focal_loss(preds.traffic_logits, target, weights.focal_alpha, weights.focal_gamma,
                         reduction="sum"), 1.0 / n_gt)
    if scene.n_traffic == 0:
        return cls, _zero(dtype), _zero(dtype)
    gt_boxes = scene.traffic_boxes()[gt_idx]
    boxes = getitem(preds.traffic_boxes, pred_idx)
    reg = mul(l1_loss(boxes, gt_boxes), 1.0 / n_gt)
    giou = mul(sum_(giou_loss(boxes, gt_boxes)), 1.0 / n_gt)
    return cls, reg, giou


def detection_loss(preds, scene, sigma: AssignmentResult, sigma_t: AssignmentResult,
                   weights: Optional[LossWeights] = None, window: Optional[BevWindow] = None) -> TensorNode:
    """lambda_l (focal + L1) over lanes plus lambda_t (focal + L1 + GIoU) over traffic"""
    weights = weights or LossWeights()
    lane_cls, lane_reg = lane_detection_terms(preds, scene, sigma, weights, window)
    t_cls, t_reg, t_giou = traffic_detection_terms(preds, scene, sigma_t, weights)
    return add(mul(add(lane_cls, lane_reg), weights.lambda_l),
               mul(add(add(t_cls, t_reg), t_giou), weights.lambda_t))


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

def _topo_terms(preds, ll: SupervisionTarget, lt: SupervisionTarget,
                weights: LossWeights) -> Tuple[TensorNode, TensorNode]:
    ll_loss = focal_loss(preds.topo_ll, ll.z, weights.focal_alpha, weights.focal_gamma, ll.valid)
    if preds.topo_lt.size == 0:
        lt_loss = _zero(preds.topo_ll.dtype)
    else:
        lt_loss = focal_loss(preds.topo_lt, lt.z, weights.focal_alpha, weights.focal_gamma, lt.valid)
    return mul(ll_loss, weights.lambda_ll), mul(lt_loss, weights.lambda_lt)


def topo_loss_o2o(preds, ll_target: SupervisionTarget, lt_target: SupervisionTarget,
                  weights: Optional[LossWeights] = None) -> TensorNode:
    """lambda_ll focal over the LL mask plus lambda_lt focal over the LT mask"""
    ll, lt = _topo_terms(preds, ll_target, lt_target, weights or LossWeights())
    return add(ll, lt)


def topo_loss_o2m(tap_preds: Sequence, targets: Sequence[Tuple[SupervisionTarget, SupervisionTarget]],
                  weights: Optional[LossWeights] = None, reduction: str = "sum") -> TensorNode:
    """Per-tap topology losses accumulated over every tap (summed, or averaged)"""
    if len(tap_preds) != len(targets):
        raise DimensionError(f"{len(tap_preds)} tap prediction sets but {len(targets)} targets")
    if reduction not in ("sum", "mean"):
        raise ConfigurationError(f"unknown aux reduction {reduction!r}")
    if not tap_preds:
        return _zero()
    weights = weights or LossWeights()
    total = None
    for preds, (ll, lt) in zip(tap_preds, targets):
        term = topo_loss_o2o(preds, ll, lt, weights)
        total = term if total is None else add(total, term)
    return mul(total, 1.0 / len(tap_preds)) if reduction == "mean" else total


def total_loss(detection: TensorNode, topo_o2o: TensorNode, topo_o2m: TensorNode,
               weights: Optional[LossWeights] = None) -> TensorNode:
    weights = weights or LossWeights()
    return add(add(detection, topo_o2o), mul(topo_o2m, weights.lambda_o2m))


# ---------------------------------------------------------------------------
# Criterion
# ---------------------------------------------------------------------------

class Criterion:
    """
    Builds the per-scene objective from a training forward pass.

    Every layer output gets one-to-one detection and topology supervision.
    The auxiliary one-to-many topology term depends on the mode: per tap in
    reordered mode, per layer output in naive_o2m mode, and per extra query
    group (with its own one-to-one matching) in group_o2m mode.
    """

    def __init__(self, weights: Optional[LossWeights] = None, mode: str = "reordered", k: int = 3,
                 regime: str = "valid_only", aux_reduction: str = "sum"):
        self.weights = weights or LossWeights()
        self.mode = mode
        self.k = k
        self.regime = regime
        self.aux_reduction = aux_reduction
        self.logger = logging.getLogger(__name__)

    def _o2o_layer(self, preds, scene, sigma_t: AssignmentResult) -> Tuple[TensorNode, TensorNode, TensorNode,
                                                                           TensorNode, TensorNode]:
        sigma = match_lanes(preds, scene, weights=self.weights)
        lane_cls, lane_reg = lane_detection_terms(preds, scene, sigma, self.weights)
        ll, lt = build_targets(scene, sigma, sigma_t, preds.n_lanes, preds.n_traffic, self.regime)
        topo_ll, topo_lt = _topo_terms(preds, ll, lt, self.weights)
        return lane_cls, lane_reg, topo_ll, topo_lt, mul(add(lane_cls, lane_reg), self.weights.lambda_l)

    def _o2m_targets(self, aux_preds: Sequence, scene, sigma_t: AssignmentResult):
        targets = []
        for preds in aux_preds:
            sets = one_to_many(lane_cost(preds, scene, self.weights), self.k)
            targets.append(build_targets(scene, sets, sigma_t, preds.n_lanes, preds.n_traffic))
        return targets

    def __call__(self, output, predictions, scene) -> Tuple[TensorNode, LossBreakdown]:
        w = self.weights
        layer_preds = output.layer_predictions or [predictions]
        sigma_t = match_traffic(predictions, scene, w)
        t_cls, t_reg, t_giou = traffic_detection_terms(predictions, scene, sigma_t, w)
        detection = mul(add(add(t_cls, t_reg), t_giou), w.lambda_t)

        breakdown = LossBreakdown(traffic_cls=float(t_cls.values), traffic_reg=float(t_reg.values),
                                  traffic_giou=float(t_giou.values))
        topo_o2o = _zero(predictions.lane_logits.dtype)
        for preds in layer_preds:
            lane_cls, lane_reg, topo_ll, topo_lt, lane_det = self._o2o_layer(preds, scene, sigma_t)
            detection = add(detection, lane_det)
            topo_o2o = add(topo_o2o, add(topo_ll, topo_lt))
            breakdown.lane_cls += float(lane_cls.values)
            breakdown.lane_reg += float(lane_reg.values)
            breakdown.topo_ll += float(topo_ll.values)
            breakdown.topo_lt += float(topo_lt.values)

        topo_o2m = _zero(predictions.lane_logits.dtype)
        aux_preds: List = []
        if self.mode == "reordered":
            aux_preds = [p for layer in output.tap_predictions for p in layer]
        elif self.mode == "naive_o2m":
            aux_preds = list(layer_preds)
        if aux_preds:
            targets = self._o2m_targets(aux_preds, scene, sigma_t)
            topo_o2m = topo_loss_o2m(aux_preds, targets, w, self.aux_reduction)
            breakdown.valid_ll_o2m = sum(count_valid(ll) for ll, _ in targets)
        elif self.mode == "group_o2m":
            group_terms = []
            for group in output.group_predictions[1:]:
                for preds in group:
                    _, _, topo_ll, topo_lt, lane_det = self._o2o_layer(preds, scene, sigma_t)
                    detection = add(detection, lane_det)
                    group_terms.append(add(topo_ll, topo_lt))
                    aux_preds.append(preds)
            if group_terms:
                topo_o2m = group_terms[0]
                for term in group_terms[1:]:
                    topo_o2m = add(topo_o2m, term)
                if self.aux_reduction == "mean":
                    topo_o2m = mul(topo_o2m, 1.0 / len(group_terms))

        total = total_loss(detection, topo_o2o, topo_o2m, w)
        breakdown.detection = float(detection.values)
        breakdown.topo_o2o = float(topo_o2o.values)
        breakdown.topo_o2m = float(topo_o2m.values)
        breakdown.total = float(total.values)
        breakdown.aux_sets = len(aux_preds)
        self.logger.debug(f"{self.mode} objective {breakdown.total:.4f} "
                          f"({breakdown.aux_sets} auxiliary sets, {breakdown.valid_ll_o2m} valid o2m LL)")
        return total, breakdown
