"""
Geometry for LaneTopoLab
Lane polylines and traffic-element boxes: arc-length resampling, discrete
Frechet distance, endpoint gaps, IoU/GIoU and the BEV window normalization
shared by scene generation, matching costs and metrics.
"""

from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from errors import GeometryError
from numerics import TensorNode, div, getitem, maximum, minimum, mul, sub

DEFAULT_POINTS = 11


@dataclass(frozen=True, eq=False)
class Polyline3D:
    """Ordered 3-D lane centerline points in meters"""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"polyline points must be [N x 3], got {list(pts.shape)}")
        if pts.shape[0] < 2:
            raise GeometryError(f"polyline needs at least 2 points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("polyline has non-finite coordinates")
        if np.all(pts == pts[0]):
            raise GeometryError("polyline points are all coincident")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, Polyline3D) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned box in normalized image coordinates"""
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"degenerate box {self.as_tuple()}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox2D":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class BevWindow:
    """
    Metric BEV window. Normalized coordinates map the window onto [-1, 1] in
    x and y; z is divided by z_scale.
    """
    x_range: Tuple[float, float] = (-25.0, 25.0)
    y_range: Tuple[float, float] = (-12.5, 12.5)
    z_scale: float = 1.0
    _scale: np.ndarray = field(init=False, repr=False, compare=False)
    _center: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        center = np.array([sum(self.x_range) / 2, sum(self.y_range) / 2, 0.0])
        scale = np.array([(self.x_range[1] - self.x_range[0]) / 2,
                          (self.y_range[1] - self.y_range[0]) / 2, self.z_scale])
        object.__setattr__(self, "_center", center)
        object.__setattr__(self, "_scale", scale)

    @classmethod
    def from_config(cls, bev) -> "BevWindow":
        return cls(tuple(bev.x_range), tuple(bev.y_range), bev.z_scale)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self._center) / self._scale

    def denormalize(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self._scale + self._center

    @property
    def scale(self) -> np.ndarray:
        return self._scale.copy()

    @property
    def center(self) -> np.ndarray:
        return self._center.copy()

    def contains(self, points: np.ndarray) -> bool:
        pts = np.asarray(points)
        return bool(np.all((pts[..., 0] >= self.x_range[0]) & (pts[..., 0] <= self.x_range[1])
                           & (pts[..., 1] >= self.y_range[0]) & (pts[..., 1] <= self.y_range[1])))


PointsLike = Union[Polyline3D, np.ndarray, Sequence[Sequence[float]]]


def _points(poly: PointsLike) -> np.ndarray:
    return poly.points if isinstance(poly, Polyline3D) else np.asarray(poly, dtype=np.float64)


def resample(poly: PointsLike, n: int = DEFAULT_POINTS) -> Polyline3D:
    """Return n points at equal arc-length spacing; endpoints kept exactly"""
    if n < 2:
        raise GeometryError(f"resample needs n >= 2, got {n}")
    pts = _points(poly)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(seg)])
    total = cumulative[-1]
    if not total > 0:
        raise GeometryError("cannot resample a zero-length polyline")
    targets = np.linspace(0.0, total, n)
    out = np.stack([np.interp(targets, cumulative, pts[:, axis]) for axis in range(3)], axis=1)
    out[0] = pts[0]
    out[-1] = pts[-1]
    return Polyline3D(out)


def _coupling_table(dist: np.ndarray) -> np.ndarray:
    p, q = dist.shape[-2:]
    ret = np.empty_like(dist)
    ret[..., 0, 0] = dist[..., 0, 0]
    for i in range(1, p):
        ret[..., i, 0] = np.maximum(ret[..., i - 1, 0], dist[..., i, 0])
    for j in range(1, q):
        ret[..., 0, j] = np.maximum(ret[..., 0, j - 1], dist[..., 0, j])
    for i in range(1, p):
        for j in range(1, q):
            best = np.minimum(np.minimum(ret[..., i - 1, j], ret[..., i, j - 1]), ret[..., i - 1, j - 1])
            ret[..., i, j] = np.maximum(best, dist[..., i, j])
    return ret


def frechet(a: PointsLike, b: PointsLike) -> float:
    """Discrete Frechet distance between two point sequences"""
    P, Q = _points(a), _points(b)
    if len(P) == 0 or len(Q) == 0:
        raise GeometryError("Frechet distance of an empty polyline")
    return float(_coupling_table(cdist(P, Q))[-1, -1])


def frechet_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Pairwise discrete Frechet distances.

    Args:
        a: [n x P x 3] polylines
        b: [m x Q x 3] polylines

    Returns:
        [n x m] distances
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    dist = np.linalg.norm(a[:, None, :, None, :] - b[None, :, None, :, :], axis=-1)
    return _coupling_table(dist)[..., -1, -1]


def endpoint_gap(pred_from: PointsLike, succ: PointsLike) -> float:
    """Distance from the end of `pred_from` to the start of `succ`"""
    return float(np.linalg.norm(_points(pred_from)[-1] - _points(succ)[0]))


def _as_box(box) -> np.ndarray:
    return box.as_array() if isinstance(box, BBox2D) else np.asarray(box, dtype=np.float64)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union, _ = _box_terms(a, b)
    return inter / union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[n x 4] against [m x 4] xyxy boxes -> [n x m] GIoU"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union, hull = _box_terms(a, b)
    return inter / union - (hull - union) / hull


def _box_terms(a: np.ndarray, b: np.ndarray):
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    hull_wh = np.maximum(a[:, None, 2:], b[None, :, 2:]) - np.minimum(a[:, None, :2], b[None, :, :2])
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter, union, hull


def iou(a: BBox2D, b: BBox2D) -> float:
    return float(pairwise_iou(_as_box(a), _as_box(b))[0, 0])


def giou(a: BBox2D, b: BBox2D) -> float:
    """IoU minus the empty fraction of the enclosing box"""
    return float(pairwise_giou(_as_box(a), _as_box(b))[0, 0])


def giou_loss(pred: TensorNode, target: np.ndarray, eps: float = 1e-9) -> TensorNode:
    """
    Differentiable per-row 1 - GIoU between predicted boxes [n x 4] and
    fixed target boxes [n x 4], both xyxy.
    """
    target = np.asarray(target, dtype=pred.dtype)
    px0, py0, px1, py1 = (getitem(pred, (slice(None), i)) for i in range(4))
    tx0, ty0, tx1, ty1 = (target[:, i] for i in range(4))

    area_p = mul(sub(px1, px0), sub(py1, py0))
    area_t = (tx1 - tx0) * (ty1 - ty0)
    iw = maximum(sub(minimum(px1, tx1), maximum(px0, tx0)), 0.0)
    ih = maximum(sub(minimum(py1, ty1), maximum(py0, ty0)), 0.0)
    inter = mul(iw, ih)
    union = sub(area_p + area_t, inter) + eps
    hull = mul(sub(maximum(px1, tx1), minimum(px0, tx0)), sub(maximum(py1, ty1), minimum(py0, ty0))) + eps
    giou_value = sub(div(inter, union), div(sub(hull, union), hull))
    return sub(1.0, giou_value)
