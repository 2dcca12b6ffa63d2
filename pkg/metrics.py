"""
Evaluation Metrics for LaneTopoLab
Lane and traffic detection AP, lane-lane and lane-traffic topology scores,
and the overall score OLS = (DET_l + DET_t + sqrt(TOP_ll) + sqrt(TOP_lt)) / 4.

TOP is an approximation of the public benchmark metric: predicted edges
between matched vertices are ranked by confidence, and ground-truth edges
with an unmatched endpoint count as misses.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import TRAFFIC_CLASSES
from errors import DimensionError, UsageError
from geometry import frechet_matrix, pairwise_iou

logger = logging.getLogger(__name__)

FRECHET_THRESHOLDS = (1.0, 2.0, 3.0)
VERTEX_FRECHET = 1.0
IOU_THRESHOLD = 0.75
NO_GT_THRESHOLD = 0.5


@dataclass
class ScenePrediction:
    """Detached, probability-space predictions for one scene"""
    lane_points: np.ndarray
    lane_scores: np.ndarray
    traffic_boxes: np.ndarray
    traffic_probs: np.ndarray
    ll_conf: np.ndarray
    lt_conf: np.ndarray

    def __post_init__(self):
        n, m = len(self.lane_scores), len(self.traffic_boxes)
        if self.ll_conf.shape != (n, n) or self.lt_conf.shape != (n, m):
            raise DimensionError(f"confidence shapes {self.ll_conf.shape}, {self.lt_conf.shape} "
                                 f"do not match {n} lanes and {m} traffic elements")

    @property
    def traffic_classes(self) -> np.ndarray:
        if len(self.traffic_probs) == 0:
            return np.zeros(0, dtype=np.int64)
        return self.traffic_probs.argmax(axis=1)

    @property
    def traffic_scores(self) -> np.ndarray:
        if len(self.traffic_probs) == 0:
            return np.zeros(0)
        return self.traffic_probs.max(axis=1)

    @classmethod
    def from_predictions(cls, preds) -> "ScenePrediction":
        """Convert decoder head outputs (logits) into probabilities"""
        def prob(node):
            x = np.asarray(node.values, dtype=np.float64)
            return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))

        return cls(
            lane_points=np.asarray(preds.lane_points, dtype=np.float64),
            lane_scores=prob(preds.lane_logits),
            traffic_boxes=np.asarray(preds.traffic_boxes.values, dtype=np.float64),
            traffic_probs=prob(preds.traffic_logits),
            ll_conf=prob(preds.topo_ll),
            lt_conf=prob(preds.topo_lt),
        )

    @classmethod
    def from_scene(cls, scene) -> "ScenePrediction":
        """Ground-truth passthrough: every element and edge at confidence 1"""
        probs = np.zeros((scene.n_traffic, TRAFFIC_CLASSES))
        probs[np.arange(scene.n_traffic), scene.traffic_attrs()] = 1.0
        return cls(
            lane_points=scene.lane_array(),
            lane_scores=np.ones(scene.n_lanes),
            traffic_boxes=scene.traffic_boxes(),
            traffic_probs=probs,
            ll_conf=scene.g_ll.astype(np.float64),
            lt_conf=scene.g_lt.astype(np.float64),
        )

    @classmethod
    def empty(cls, points: int = 11) -> "ScenePrediction":
        return cls(np.zeros((0, points, 3)), np.zeros(0), np.zeros((0, 4)), np.zeros((0, TRAFFIC_CLASSES)),
                   np.zeros((0, 0)), np.zeros((0, 0)))


@dataclass
class MetricsReport:
    """Dataset-level scores in [0, 1] plus per-scene breakdown"""
    det_l: float
    det_t: float
    top_ll: float
    top_lt: float
    ols: float
    counts: Dict[str, int] = field(default_factory=dict)
    per_scene: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    def per_scene_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.per_scene, columns=["scene", "det_l", "det_t", "top_ll", "top_lt", "ols"])

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.per_scene_frame().to_csv(path, index=False)
        return path


# ---------------------------------------------------------------------------
# Ranking primitives
# ---------------------------------------------------------------------------

def average_precision(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> float:
    """
    Sum of precision at each true positive over n_gt, ranking by descending
    score; equal scores keep their input order.

    With no ground truth, returns 1.0 iff no prediction reaches 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if n_gt == 0:
        return 0.0 if np.any(scores >= NO_GT_THRESHOLD) else 1.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = is_tp[order]
    precision = np.cumsum(tp) / np.arange(1, len(tp) + 1)
    return float((precision * tp).sum() / n_gt)


def greedy_match(scores: np.ndarray, distance: np.ndarray, threshold: float,
                 similarity: bool = False) -> Tuple[np.ndarray, Dict[int, int]]:
    """
    Confidence-ordered greedy matching. Each prediction, highest score first,
    takes the closest unmatched ground truth within the threshold.

    Args:
        scores: [N_pred]
        distance: [N_pred x N_gt]; a similarity (>= threshold) if `similarity`

    Returns:
        (true-positive flags in input order, prediction -> ground truth map)
    """
    n_pred = len(scores)
    is_tp = np.zeros(n_pred, dtype=bool)
    matches: Dict[int, int] = {}
    if n_pred == 0 or distance.shape[1] == 0:
        return is_tp, matches
    taken = np.zeros(distance.shape[1], dtype=bool)
    for i in np.argsort(-np.asarray(scores), kind="stable"):
        row = np.where(taken, -np.inf if similarity else np.inf, distance[i])
        j = int(np.argmax(row) if similarity else np.argmin(row))
        ok = row[j] >= threshold if similarity else row[j] <= threshold
        if ok and not taken[j]:
            taken[j] = True
            is_tp[i] = True
            matches[int(i)] = j
    return is_tp, matches


# ---------------------------------------------------------------------------
# Per-scene evidence, pooled across scenes
# ---------------------------------------------------------------------------

@dataclass
class _Evidence:
    scores: List[np.ndarray] = field(default_factory=list)
    tp: List[np.ndarray] = field(default_factory=list)
    n_gt: int = 0

    def add(self, scores: np.ndarray, tp: np.ndarray, n_gt: int):
        self.scores.append(np.asarray(scores, dtype=np.float64))
        self.tp.append(np.asarray(tp, dtype=bool))
        self.n_gt += n_gt

    def ap(self) -> float:
        scores = np.concatenate(self.scores) if self.scores else np.zeros(0)
        tp = np.concatenate(self.tp) if self.tp else np.zeros(0, dtype=bool)
        return average_precision(scores, tp, self.n_gt)


def _lane_distances(pred: ScenePrediction, scene) -> np.ndarray:
    if len(pred.lane_scores) == 0 or scene.n_lanes == 0:
        return np.zeros((len(pred.lane_scores), scene.n_lanes))
    return frechet_matrix(pred.lane_points, scene.lane_array())


def _traffic_matches(pred: ScenePrediction, scene, cls: Optional[int] = None):
    """Greedy IoU matching restricted to one class (or class-consistent over all)"""
    pred_cls, gt_attr = pred.traffic_classes, scene.traffic_attrs()
    iou = pairwise_iou(pred.traffic_boxes, scene.traffic_boxes()) if len(pred_cls) and len(gt_attr) \
        else np.zeros((len(pred_cls), len(gt_attr)))
    same = pred_cls[:, None] == gt_attr[None, :]
    iou = np.where(same, iou, -1.0)
    if cls is None:
        return greedy_match(pred.traffic_scores, iou, IOU_THRESHOLD, similarity=True)
    rows = np.nonzero(pred_cls == cls)[0]
    cols = np.nonzero(gt_attr == cls)[0]
    tp, local = greedy_match(pred.traffic_scores[rows], iou[np.ix_(rows, cols)], IOU_THRESHOLD, similarity=True)
    return rows, tp, {int(rows[i]): int(cols[j]) for i, j in local.items()}


def _edge_evidence(conf: np.ndarray, gt: np.ndarray, row_map: Dict[int, int], col_map: Dict[int, int],
                   exclude_self: bool) -> Tuple[np.ndarray, np.ndarray, int]:
    scores, tps = [], []
    for i, p in sorted(row_map.items()):
        for j, q in sorted(col_map.items()):
            if exclude_self and i == j:
                continue
            if conf[i, j] > 0:
                scores.append(conf[i, j])
                tps.append(bool(gt[p, q]))
    return np.array(scores), np.array(tps, dtype=bool), int(np.count_nonzero(gt))


def _collect(predictions: Sequence[ScenePrediction], scenes: Sequence) -> Dict[str, Any]:
    det_l = {t: _Evidence() for t in FRECHET_THRESHOLDS}
    classes = sorted({int(a) for scene in scenes for a in scene.traffic_attrs()})
    det_t = {c: _Evidence() for c in classes}
    top_ll, top_lt = _Evidence(), _Evidence()
    matched_lanes = matched_traffic = 0
    stray_traffic = []

    for pred, scene in zip(predictions, scenes):
        dist = _lane_distances(pred, scene)
        for t in FRECHET_THRESHOLDS:
            tp, _ = greedy_match(pred.lane_scores, dist, t)
            det_l[t].add(pred.lane_scores, tp, scene.n_lanes)
        for c in classes:
            rows, tp, _ = _traffic_matches(pred, scene, c)
            det_t[c].add(pred.traffic_scores[rows], tp, int(np.count_nonzero(scene.traffic_attrs() == c)))
        stray_traffic.append(pred.traffic_scores)

        _, lane_map = greedy_match(pred.lane_scores, dist, VERTEX_FRECHET)
        _, traffic_map = _traffic_matches(pred, scene)
        matched_lanes += len(lane_map)
        matched_traffic += len(traffic_map)
        top_ll.add(*_edge_evidence(pred.ll_conf, scene.g_ll, lane_map, lane_map, exclude_self=True))
        top_lt.add(*_edge_evidence(pred.lt_conf, scene.g_lt, lane_map, traffic_map, exclude_self=False))

    if classes:
        det_t_value = float(np.mean([det_t[c].ap() for c in classes]))
    else:
        scores = np.concatenate(stray_traffic) if stray_traffic else np.zeros(0)
        det_t_value = average_precision(scores, np.zeros(len(scores), dtype=bool), 0)
    return {
        "det_l": float(np.mean([det_l[t].ap() for t in FRECHET_THRESHOLDS])),
        "det_t": det_t_value,
        "top_ll": top_ll.ap(),
        "top_lt": top_lt.ap(),
        "counts": {
            "gt_lanes": sum(s.n_lanes for s in scenes),
            "gt_traffic": sum(s.n_traffic for s in scenes),
            "gt_ll_edges": top_ll.n_gt,
            "gt_lt_edges": top_lt.n_gt,
            "matched_lanes": matched_lanes,
            "matched_traffic": matched_traffic,
        },
    }


def det_l(pred: ScenePrediction, scene) -> float:
    """Mean AP over Frechet thresholds 1, 2, 3 m"""
    return _collect([pred], [scene])["det_l"]


def det_t(pred: ScenePrediction, scene) -> float:
    """AP at IoU 0.75 averaged over the attribute classes present in ground truth"""
    return _collect([pred], [scene])["det_t"]


def top_score(pred: ScenePrediction, scene, kind: str = "ll") -> float:
    """Topology AP for lane-lane ("ll") or lane-traffic ("lt") edges"""
    if kind not in ("ll", "lt"):
        raise UsageError(f"unknown topology kind {kind!r}")
    return _collect([pred], [scene])[f"top_{kind}"]


def ols(det_l: float, det_t: float, top_ll: float, top_lt: float) -> float:
    """(DET_l + DET_t + sqrt(TOP_ll) + sqrt(TOP_lt)) / 4"""
    for name, value in (("det_l", det_l), ("det_t", det_t), ("top_ll", top_ll), ("top_lt", top_lt)):
        if not (isinstance(value, (int, float, np.floating)) and 0.0 <= value <= 1.0):
            raise UsageError(f"{name} must lie in [0, 1], got {value!r}")
    return 0.25 * (det_l + det_t + math.sqrt(top_ll) + math.sqrt(top_lt))


def ols_tolerance(top_ll: float, top_lt: float, step: float = 0.001) -> float:
    """
    Largest OLS deviation explained by rounding every input and the printed
    score to `step`: half a step per input, scaled by the OLS sensitivity to
    that input, plus half a step for the printed value.
    """
    half = step / 2
    sensitivity = 0.5 + 1.0 / (8.0 * math.sqrt(max(top_ll, 1e-12))) + 1.0 / (8.0 * math.sqrt(max(top_lt, 1e-12)))
    return half * sensitivity + half


def check_reported(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """
    Recompute OLS for reported rows given in percent. Each result carries the
    recomputed value, the deviation and whether rounding explains it.
    """
    results = []
    for row in rows:
        values = {k: row[k] / 100.0 for k in ("det_l", "det_t", "top_ll", "top_lt")}
        score = ols(**values)
        deviation = abs(score - row["ols"] / 100.0)
        tolerance = ols_tolerance(values["top_ll"], values["top_lt"])
        results.append({**row, "recomputed": score, "deviation": deviation,
                        "tolerance": tolerance, "consistent": deviation <= tolerance})
    return results


def evaluate_predictions(predictions: Sequence[ScenePrediction], scenes: Sequence) -> MetricsReport:
    """Pooled metrics over all scenes plus a per-scene breakdown"""
    if len(predictions) != len(scenes):
        raise UsageError(f"{len(predictions)} predictions for {len(scenes)} scenes")
    if not scenes:
        raise UsageError("cannot evaluate an empty scene list")
    pooled = _collect(predictions, scenes)
    per_scene = []
    for i, (pred, scene) in enumerate(zip(predictions, scenes)):
        single = _collect([pred], [scene])
        per_scene.append({"scene": i, "det_l": single["det_l"], "det_t": single["det_t"],
                          "top_ll": single["top_ll"], "top_lt": single["top_lt"],
                          "ols": ols(single["det_l"], single["det_t"], single["top_ll"], single["top_lt"])})
    report = MetricsReport(
        det_l=pooled["det_l"], det_t=pooled["det_t"], top_ll=pooled["top_ll"], top_lt=pooled["top_lt"],
        ols=ols(pooled["det_l"], pooled["det_t"], pooled["top_ll"], pooled["top_lt"]),
        counts=pooled["counts"], per_scene=per_scene,
    )
    logger.info(f"Evaluated {len(scenes)} scenes: OLS {report.ols:.4f} "
                f"(DET_l {report.det_l:.3f}, DET_t {report.det_t:.3f}, "
                f"TOP_ll {report.top_ll:.3f}, TOP_lt {report.top_lt:.3f})")
    return report
