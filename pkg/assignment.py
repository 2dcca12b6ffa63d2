"""
Label Assignment for LaneTopoLab
Exact one-to-one Hungarian matching, the one-to-many extension that gives
each ground truth K positives, and the detection cost matrices feeding both.

Rows of every cost matrix are ground truths; columns are predictions.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from config import LossWeights
from errors import ConfigurationError, DimensionError, NumericError, SizeError
from geometry import BevWindow, pairwise_giou

logger = logging.getLogger(__name__)


@dataclass
class AssignmentResult:
    """
    Matching of ground truths to predictions.

    For "o2o", sigma[p] is the prediction matched to ground truth p. For
    "o2m", sigma[p] is the sorted row of K predictions assigned to p.
    """
    mode: str
    sigma: np.ndarray
    total_cost: float

    @property
    def n_gt(self) -> int:
        return self.sigma.shape[0]

    @property
    def k(self) -> int:
        return 1 if self.mode == "o2o" else self.sigma.shape[1]

    @property
    def sets(self) -> List[Tuple[int, ...]]:
        """Positive prediction indices per ground truth"""
        rows = self.sigma.reshape(self.n_gt, -1)
        return [tuple(int(j) for j in row) for row in rows]

    def positives(self) -> np.ndarray:
        """Every assigned prediction index, ascending"""
        return np.sort(self.sigma.reshape(-1)).astype(np.int64)

    def pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """(gt index, prediction index) arrays covering every positive"""
        rows = self.sigma.reshape(self.n_gt, -1)
        gt = np.repeat(np.arange(self.n_gt), rows.shape[1])
        return gt, rows.reshape(-1).astype(np.int64)

    def owner(self) -> Dict[int, int]:
        """Map prediction index -> ground-truth index"""
        gt, pred = self.pairs()
        return {int(j): int(p) for p, j in zip(gt, pred)}

    @classmethod
    def empty(cls, mode: str = "o2o", k: int = 1) -> "AssignmentResult":
        shape = (0,) if mode == "o2o" else (0, k)
        return cls(mode=mode, sigma=np.zeros(shape, dtype=np.int64), total_cost=0.0)


def _check_costs(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got shape {list(c.shape)}")
    if not np.all(np.isfinite(c)):
        raise NumericError("cost matrix has non-finite entries")
    return c


def _row_order_total(c: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> float:
    total = 0.0
    for r, s in zip(rows, cols):
        total += float(c[r, s])
    return total


def _optimal_cost(c: np.ndarray) -> float:
    if c.shape[0] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].sum())


def _lowest_index_optimum(c: np.ndarray) -> np.ndarray:
    """
    Among all minimum-cost injective assignments, the one whose column
    sequence (row 0, row 1, ...) is lexicographically smallest.

    Rows are fixed in order to the lowest free column that still admits an
    optimal completion of the remaining rows.
    """
    n_rows, n_cols = c.shape
    remaining = _optimal_cost(c)
    tol = 1e-9 * max(1.0, abs(remaining))
    free = np.ones(n_cols, dtype=bool)
    sigma = np.empty(n_rows, dtype=np.int64)
    for p in range(n_rows):
        rest = c[p + 1:]
        # removing a column never lowers the completion cost
        bound = _optimal_cost(rest[:, free])
        for j in np.flatnonzero(free):
            if c[p, j] + bound > remaining + tol:
                continue
            free[j] = False
            if c[p, j] + _optimal_cost(rest[:, free]) <= remaining + tol:
                sigma[p] = j
                remaining -= c[p, j]
                break
            free[j] = True
        else:
            raise NumericError(f"no optimal completion found for row {p}")
    return sigma


def hungarian(c: np.ndarray) -> AssignmentResult:
    """
    Minimum-cost injective assignment of every row to a distinct column.

    Ties are broken by the lowest prediction index, row by row.
    """
    c = _check_costs(c)
    n_gt, n_pred = c.shape
    if n_pred < n_gt:
        raise SizeError(f"one-to-one assignment needs N_pred >= N_gt, got {n_pred} < {n_gt}")
    if n_gt == 0:
        return AssignmentResult.empty("o2o")
    sigma = _lowest_index_optimum(c)
    return AssignmentResult(mode="o2o", sigma=sigma, total_cost=_row_order_total(c, np.arange(n_gt), sigma))


def one_to_many(c: np.ndarray, k: int) -> AssignmentResult:
    """
    Exactly k positives per ground truth, at most one ground truth per
    prediction: each row is replicated k times and solved one-to-one.
    Ties follow the same lowest-index rule over the replicated rows, so
    k == 1 selects the same predictions as `hungarian`.
    """
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")
    c = _check_costs(c)
    n_gt, n_pred = c.shape
    if n_pred < k * n_gt:
        raise SizeError(f"one-to-many assignment needs K*N_gt = {k}*{n_gt} = {k * n_gt} predictions, "
                        f"got N_pred = {n_pred}")
    if n_gt == 0:
        return AssignmentResult.empty("o2m", k)
    sigma = np.sort(_lowest_index_optimum(np.repeat(c, k, axis=0)).reshape(n_gt, k), axis=1)
    gt = np.repeat(np.arange(n_gt), k)
    total = _row_order_total(c, gt, sigma.reshape(-1))
    return AssignmentResult(mode="o2m", sigma=sigma, total_cost=total)


def assign(c: np.ndarray, k: int = 1) -> AssignmentResult:
    """One-to-one for k == 1, one-to-many otherwise"""
    return hungarian(c) if k == 1 else one_to_many(c, k)


# ---------------------------------------------------------------------------
# Cost matrices
# ---------------------------------------------------------------------------

def focal_cost(logits: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Positive-class focal term alpha * (1-p)^gamma * -log(p), p = sigmoid(logit)"""
    x = np.asarray(logits, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-np.clip(x, -50.0, 50.0)))
    return alpha * (1.0 - p) ** gamma * np.logaddexp(0.0, -x)


def lane_cost_arrays(logits: np.ndarray, points_norm: np.ndarray, gt_points_norm: np.ndarray,
                     weights: Optional[LossWeights] = None) -> np.ndarray:
    """
    Args:
        logits: [N_pred] lane logits
        points_norm: [N_pred x N_P x 3] predicted points in window units
        gt_points_norm: [N_gt x N_P x 3] ground-truth points in window units
    """
    weights = weights or LossWeights()
    n_pred = points_norm.shape[0]
    n_gt = gt_points_norm.shape[0]
    if n_gt == 0:
        return np.zeros((0, n_pred))
    pred = np.asarray(points_norm, dtype=np.float64).reshape(n_pred, -1)
    gt = np.asarray(gt_points_norm, dtype=np.float64).reshape(n_gt, -1)
    if pred.shape[1] != gt.shape[1]:
        raise DimensionError(f"point layout mismatch: predictions {list(points_norm.shape)}, "
                             f"ground truth {list(gt_points_norm.shape)}")
    l1 = cdist(gt, pred, "cityblock") / gt.shape[1]
    cls = focal_cost(logits, weights.focal_alpha, weights.focal_gamma)
    return weights.cost_cls * cls[None, :] + weights.cost_reg * l1


def lane_cost(preds, scene, weights: Optional[LossWeights] = None,
              window: Optional[BevWindow] = None) -> np.ndarray:
    """[N_L x N_pred] lane matching cost: focal classification plus mean L1"""
    window = window or preds.window
    gt = window.normalize(scene.lane_array()) if scene.n_lanes else np.zeros((0,) + preds.lane_points_norm.shape[1:])
    return lane_cost_arrays(preds.lane_logits.values, preds.lane_points_norm.values, gt, weights)


def traffic_cost_arrays(logits: np.ndarray, boxes: np.ndarray, gt_boxes: np.ndarray, gt_attrs: np.ndarray,
                        weights: Optional[LossWeights] = None) -> np.ndarray:
    """
    Args:
        logits: [N_pred x classes]
        boxes: [N_pred x 4] xyxy
        gt_boxes: [N_gt x 4] xyxy
        gt_attrs: [N_gt] class ids
    """
    weights = weights or LossWeights()
    n_gt, n_pred = len(gt_boxes), len(boxes)
    if n_gt == 0 or n_pred == 0:
        return np.zeros((n_gt, n_pred))
    cls = focal_cost(np.asarray(logits)[:, np.asarray(gt_attrs)].T, weights.focal_alpha, weights.focal_gamma)
    l1 = cdist(np.asarray(gt_boxes, dtype=np.float64), np.asarray(boxes, dtype=np.float64), "cityblock")
    giou = pairwise_giou(gt_boxes, boxes)
    return weights.cost_cls * cls + weights.cost_reg * l1 - weights.cost_giou * giou


def traffic_cost(preds, scene, weights: Optional[LossWeights] = None) -> np.ndarray:
    """[N_T x N_pred] traffic matching cost: lane terms plus a -GIoU term"""
    return traffic_cost_arrays(preds.traffic_logits.values, preds.traffic_boxes.values,
                               scene.traffic_boxes(), scene.traffic_attrs(), weights)


def match_lanes(preds, scene, k: int = 1, weights: Optional[LossWeights] = None) -> AssignmentResult:
    result = assign(lane_cost(preds, scene, weights), k)
    logger.debug(f"Matched {scene.n_lanes} lanes with K={k}: cost {result.total_cost:.4f}")
    return result


def match_traffic(preds, scene, weights: Optional[LossWeights] = None) -> AssignmentResult:
    return hungarian(traffic_cost(preds, scene, weights))
