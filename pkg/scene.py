"""
Scene Generation for LaneTopoLab
Procedural ground-truth road scenes (lanes, traffic elements, topology
matrices), their JSON document format, and the synthetic BEV / traffic
feature front-end the decoder consumes.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import TRAFFIC_CLASSES, BevConfig, GeneratorConfig
from errors import (ConfigurationError, DimensionError, GeometryError, LaneTopoError,
                    SceneParseError, UnsupportedVersionError)
from geometry import BBox2D, BevWindow, Polyline3D, endpoint_gap, resample
from numerics import ParamStore, TensorNode, apply_linear

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONNECT_TOLERANCE = 0.5
BEV_CHANNELS = ("occupancy", "sin", "cos", "start", "end", "noise", "elevation", "curvature")
TRAFFIC_FEATURES = 4 + TRAFFIC_CLASSES

LANE_SLOTS = (-1.75, 1.75, -5.25, 5.25, -8.75, 8.75)
X_START, X_END = -22.0, 22.0
FORK_OFFSET = 3.5
BOX_W, BOX_H = 0.04, 0.08

TURN_STRAIGHT, TURN_LEFT, TURN_RIGHT = 0, 1, 2
TURN_SIGNAL_BASE = 3

# feasible lane counts per template
TEMPLATE_LANES = {
    "straight": (1, 2 * len(LANE_SLOTS)),
    "fork": (3, 7),
    "merge": (3, 7),
    "intersection": (3, 10),
}


@dataclass(frozen=True)
class TrafficElement:
    """A traffic light or sign: box plus attribute class"""
    box: BBox2D
    attr: int

    def __post_init__(self):
        if not 0 <= self.attr < TRAFFIC_CLASSES:
            raise ConfigurationError(f"traffic attribute {self.attr} outside 0..{TRAFFIC_CLASSES - 1}")


@dataclass(eq=False)
class SceneGraph:
    """Ground-truth lanes, traffic elements and their topology matrices"""
    lanes: List[Polyline3D]
    traffic: List[TrafficElement]
    g_ll: np.ndarray
    g_lt: np.ndarray
    template: str = ""

    def __post_init__(self):
        self.g_ll = np.asarray(self.g_ll, dtype=np.int8).reshape(len(self.lanes), len(self.lanes))
        self.g_lt = np.asarray(self.g_lt, dtype=np.int8).reshape(len(self.lanes), len(self.traffic))

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    @property
    def n_traffic(self) -> int:
        return len(self.traffic)

    def lane_array(self) -> np.ndarray:
        if not self.lanes:
            return np.zeros((0, 0, 3))
        return np.stack([lane.points for lane in self.lanes])

    def traffic_boxes(self) -> np.ndarray:
        if not self.traffic:
            return np.zeros((0, 4))
        return np.stack([t.box.as_array() for t in self.traffic])

    def traffic_attrs(self) -> np.ndarray:
        return np.array([t.attr for t in self.traffic], dtype=np.int64)

    def validate(self):
        """Check the matrix invariants; raise on the first violation"""
        n_l, n_t = self.n_lanes, self.n_traffic
        if self.g_ll.shape != (n_l, n_l) or self.g_lt.shape != (n_l, n_t):
            raise DimensionError(f"topology shapes {self.g_ll.shape}, {self.g_lt.shape} vs {n_l} lanes, {n_t} traffic")
        for name, g in (("g_ll", self.g_ll), ("g_lt", self.g_lt)):
            if not np.isin(g, (0, 1)).all():
                raise ConfigurationError(f"{name} must be binary")
        if n_l and np.any(np.diag(self.g_ll)):
            raise GeometryError("g_ll has a self-connection")
        for p, q in zip(*np.nonzero(self.g_ll)):
            gap = endpoint_gap(self.lanes[p], self.lanes[q])
            if gap >= CONNECT_TOLERANCE:
                raise GeometryError(f"lanes {p}->{q} connected with endpoint gap {gap:.3f} m")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return (self.lanes == other.lanes and self.traffic == other.traffic
                and np.array_equal(self.g_ll, other.g_ll) and np.array_equal(self.g_lt, other.g_lt))

    def __str__(self):
        return (f"SceneGraph '{self.template or 'custom'}' ({self.n_lanes} lanes, "
                f"{self.n_traffic} traffic, {int(self.g_ll.sum())} lane edges)")


@dataclass(frozen=True)
class BevFeature:
    """H x W x C feature grid over the metric BEV window; rows run along x"""
    grid: np.ndarray
    window: BevWindow

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def channels(self) -> int:
        return self.grid.shape[2]

    def channel(self, name: str) -> np.ndarray:
        return self.grid[:, :, BEV_CHANNELS.index(name)]

    def flatten(self) -> np.ndarray:
        """(H*W) x C in row-major cell order"""
        return self.grid.reshape(-1, self.channels)


def _quantize(values: np.ndarray) -> np.ndarray:
    flat = [float(f"{v:.9g}") for v in np.asarray(values, dtype=np.float64).ravel()]
    return np.array(flat, dtype=np.float64).reshape(np.shape(values))


def _segment(p0: Sequence[float], p1: Sequence[float], samples: int = 16) -> np.ndarray:
    return np.linspace(np.asarray(p0, dtype=np.float64), np.asarray(p1, dtype=np.float64), samples)


def _hermite(p0, t0, p1, t1, samples: int = 64) -> np.ndarray:
    """Cubic Hermite curve between two 2-D poses"""
    p0, t0, p1, t1 = (np.asarray(v, dtype=np.float64) for v in (p0, t0, p1, t1))
    s = np.linspace(0.0, 1.0, samples)[:, None]
    chord = np.linalg.norm(p1 - p0)
    return ((2 * s**3 - 3 * s**2 + 1) * p0 + (s**3 - 2 * s**2 + s) * chord * t0
            + (-2 * s**3 + 3 * s**2) * p1 + (s**3 - s**2) * chord * t1)


class SceneGenerator:
    """Builds SceneGraphs from road templates"""

    def __init__(self, config: Optional[GeneratorConfig] = None):
        self.config = config or GeneratorConfig()
        self.logger = logging.getLogger(__name__)
        for template in self.config.templates:
            self._lane_bounds(template)

    def _lane_bounds(self, template: str) -> Tuple[int, int]:
        lo, hi = TEMPLATE_LANES[template]
        lo, hi = max(lo, self.config.lane_min), min(hi, self.config.lane_max)
        if lo > hi:
            raise ConfigurationError(
                f"template {template!r} cannot build {self.config.lane_min}..{self.config.lane_max} lanes "
                f"(feasible {TEMPLATE_LANES[template][0]}..{TEMPLATE_LANES[template][1]})")
        return lo, hi

    def generate(self, seed: int = 0, template: Optional[str] = None, n_lanes: Optional[int] = None) -> SceneGraph:
        """
        Generate one scene.

        Args:
            seed: scene seed, combined with the generator config seed
            template: force a template instead of drawing one
            n_lanes: force a lane count instead of drawing one
        """
        rng = np.random.default_rng([self.config.seed, seed])
        template = template or self.config.templates[int(rng.integers(len(self.config.templates)))]
        lo, hi = self._lane_bounds(template)
        if n_lanes is None:
            n_lanes = int(rng.integers(lo, hi + 1))
        elif not lo <= n_lanes <= hi:
            raise ConfigurationError(f"template {template!r} cannot build {n_lanes} lanes")

        builder = getattr(self, f"_build_{template}")
        graph = builder(n_lanes, rng)
        graph = self._relabel(graph, rng)
        lanes = self._finish_lanes(graph, rng)
        g_ll = nx.to_numpy_array(graph, nodelist=range(len(lanes)), dtype=np.int8)
        traffic, g_lt = self._place_traffic(graph, lanes, rng)

        scene = SceneGraph(lanes=lanes, traffic=traffic, g_ll=g_ll, g_lt=g_lt, template=template)
        scene.validate()
        self.logger.debug(f"Generated {scene} for seed {seed}")
        return scene

    # -- templates -------------------------------------------------------

    def _corridor(self, graph: nx.DiGraph, y: float, split: bool):
        if split:
            first = self._add_lane(graph, _segment((X_START, y), (0.0, y)))
            second = self._add_lane(graph, _segment((0.0, y), (X_END, y)))
            graph.add_edge(first, second)
        else:
            self._add_lane(graph, _segment((X_START, y), (X_END, y)))

    @staticmethod
    def _add_lane(graph: nx.DiGraph, points_2d: np.ndarray) -> int:
        node = graph.number_of_nodes()
        graph.add_node(node, points=points_2d)
        return node

    def _build_straight(self, n_lanes: int, rng: np.random.Generator) -> nx.DiGraph:
        graph = nx.DiGraph()
        corridors = math.ceil(n_lanes / 2)
        splits = n_lanes - corridors
        for i in range(corridors):
            self._corridor(graph, LANE_SLOTS[i], split=i < splits)
        return graph

    def _build_fork(self, n_lanes: int, rng: np.random.Generator, merge: bool = False) -> nx.DiGraph:
        graph = nx.DiGraph()
        side = 1.0 if rng.random() < 0.5 else -1.0
        y0 = side * 1.75
        y1 = y0 + side * FORK_OFFSET
        if merge:
            trunk = self._add_lane(graph, _segment((0.0, y0), (X_END, y0)))
            straight = self._add_lane(graph, _segment((X_START, y0), (0.0, y0)))
            curve = self._add_lane(graph, _hermite((X_START, y1), (1, 0), (0.0, y0), (1, 0)))
            graph.add_edge(straight, trunk)
            graph.add_edge(curve, trunk)
        else:
            trunk = self._add_lane(graph, _segment((X_START, y0), (0.0, y0)))
            straight = self._add_lane(graph, _segment((0.0, y0), (X_END, y0)))
            curve = self._add_lane(graph, _hermite((0.0, y0), (1, 0), (X_END, y1), (1, 0)))
            graph.add_edge(trunk, straight)
            graph.add_edge(trunk, curve)
        free = [y for y in LANE_SLOTS if y not in (y0, y1)]
        free.sort(key=lambda y: (abs(y), -side * y))
        for y in free[: n_lanes - 3]:
            self._corridor(graph, y, split=False)
        return graph

    def _build_merge(self, n_lanes: int, rng: np.random.Generator) -> nx.DiGraph:
        return self._build_fork(n_lanes, rng, merge=True)

    def _build_intersection(self, n_lanes: int, rng: np.random.Generator) -> nx.DiGraph:
        r, box = 1.75, 4.0
        east, north, south = (1, 0), (0, 1), (0, -1)
        catalog = [
            ("w_in", _segment((X_START, -r), (-box, -r))),
            ("straight", _segment((-box, -r), (box, -r))),
            ("e_out", _segment((box, -r), (X_END, -r))),
            ("right", _hermite((-box, -r), east, (-r, -box), south)),
            ("s_out", _segment((-r, -box), (-r, -12.0))),
            ("left", _hermite((-box, -r), east, (r, box), north)),
            ("n_out", _segment((r, box), (r, 12.0))),
            ("e_in", _segment((X_END, r), (box, r))),
            ("straight_w", _segment((box, r), (-box, r))),
            ("w_out", _segment((-box, r), (X_START, r))),
        ]
        links = [("w_in", "straight"), ("straight", "e_out"), ("w_in", "right"), ("right", "s_out"),
                 ("w_in", "left"), ("left", "n_out"), ("e_in", "straight_w"), ("straight_w", "w_out")]
        graph = nx.DiGraph()
        ids = {name: self._add_lane(graph, pts) for name, pts in catalog[:n_lanes]}
        for a, b in links:
            if a in ids and b in ids:
                graph.add_edge(ids[a], ids[b])
        return graph

    # -- finishing -------------------------------------------------------

    @staticmethod
    def _relabel(graph: nx.DiGraph, rng: np.random.Generator) -> nx.DiGraph:
        order = rng.permutation(graph.number_of_nodes())
        return nx.relabel_nodes(graph, {old: int(new) for old, new in enumerate(order)})

    def _finish_lanes(self, graph: nx.DiGraph, rng: np.random.Generator) -> List[Polyline3D]:
        """Resample, add grade and interior noise, quantize"""
        slope = float(rng.uniform(-0.02, 0.02))
        lanes = []
        for node in range(graph.number_of_nodes()):
            pts_2d = graph.nodes[node]["points"]
            pts = np.column_stack([pts_2d, np.zeros(len(pts_2d))])
            pts = resample(pts, self.config.points).points
            if self.config.noise_std > 0:
                pts[1:-1] += rng.normal(0.0, self.config.noise_std, size=pts[1:-1].shape)
            pts[:, 2] += slope * pts[:, 0]
            lanes.append(Polyline3D(_quantize(pts)))
        return lanes

    @staticmethod
    def _turn_code(incoming: Polyline3D, successor: Polyline3D) -> int:
        d_in = incoming.points[-1, :2] - incoming.points[-2, :2]
        d_out = successor.points[-1, :2] - successor.points[-2, :2]
        cross = d_in[0] * d_out[1] - d_in[1] * d_out[0]
        angle = math.degrees(math.atan2(cross, float(np.dot(d_in, d_out))))
        if abs(angle) >= 20.0:
            return TURN_LEFT if angle > 0 else TURN_RIGHT
        heading = d_in / np.linalg.norm(d_in)
        shift = successor.points[-1, :2] - successor.points[0, :2]
        lateral = heading[0] * shift[1] - heading[1] * shift[0]
        if abs(lateral) < 1.0:
            return TURN_STRAIGHT
        return TURN_LEFT if lateral > 0 else TURN_RIGHT

    def _place_traffic(self, graph: nx.DiGraph, lanes: List[Polyline3D],
                       rng: np.random.Generator) -> Tuple[List[TrafficElement], np.ndarray]:
        """One signal per (incoming lane, turn) plus distractors that govern nothing"""
        candidates = sorted({(p, self._turn_code(lanes[p], lanes[q])) for p, q in graph.edges})
        n_traffic = int(rng.integers(self.config.traffic_min, self.config.traffic_max + 1))
        n_real = min(n_traffic, len(candidates))
        chosen = sorted(rng.choice(len(candidates), size=n_real, replace=False).tolist()) if n_real else []

        placed: List[Tuple[TrafficElement, Optional[int]]] = []
        turn_shift = {TURN_STRAIGHT: 0.0, TURN_LEFT: -0.045, TURN_RIGHT: 0.045}
        for idx in chosen:
            lane, code = candidates[idx]
            cx = 0.5 - lanes[lane].end[1] / 30.0 + turn_shift[code] + rng.uniform(-0.005, 0.005)
            cy = 0.35 + rng.uniform(-0.005, 0.005)
            placed.append((self._element(cx, cy, TURN_SIGNAL_BASE + code), lane))
        for _ in range(n_traffic - n_real):
            cx = rng.uniform(0.1, 0.9)
            cy = 0.75 + rng.uniform(-0.02, 0.02)
            placed.append((self._element(cx, cy, int(rng.integers(TRAFFIC_CLASSES))), None))

        order = rng.permutation(len(placed))
        traffic = [placed[i][0] for i in order]
        g_lt = np.zeros((len(lanes), len(traffic)), dtype=np.int8)
        for col, i in enumerate(order):
            lane = placed[i][1]
            if lane is not None:
                g_lt[lane, col] = 1
        return traffic, g_lt

    @staticmethod
    def _element(cx: float, cy: float, attr: int) -> TrafficElement:
        x0, y0, x1, y1 = _quantize(np.array([cx - BOX_W / 2, cy - BOX_H / 2, cx + BOX_W / 2, cy + BOX_H / 2]))
        return TrafficElement(BBox2D(x0, y0, x1, y1), attr)


def generate(config: GeneratorConfig, seed: int) -> SceneGraph:
    """Deterministic scene for (config, seed)"""
    return SceneGenerator(config).generate(seed)


def scene_pool(config: GeneratorConfig, count: int, seed: int = 0) -> List[SceneGraph]:
    """`count` scenes from consecutive seeds starting at `seed`"""
    generator = SceneGenerator(config)
    return [generator.generate(seed + i) for i in range(count)]


# ---------------------------------------------------------------------------
# Synthetic feature front-end
# ---------------------------------------------------------------------------

def _point_segment_distance(cells: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distances [cells x segments] and projection parameters"""
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    t = np.clip(((cells[:, None, :] - a[None]) * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(cells[:, None, :] - closest, axis=2), t


def cell_centers(bev: BevConfig) -> np.ndarray:
    """[(H*W) x 2] metric (x, y) centers in row-major order"""
    dx = (bev.x_range[1] - bev.x_range[0]) / bev.height
    dy = (bev.y_range[1] - bev.y_range[0]) / bev.width
    xs = bev.x_range[0] + (np.arange(bev.height) + 0.5) * dx
    ys = bev.y_range[0] + (np.arange(bev.width) + 0.5) * dy
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def rasterize(scene: SceneGraph, cfg: Optional[BevConfig] = None, seed: int = 0) -> BevFeature:
    """
    Render a scene into the 8-channel BEV grid.

    A cell is occupied when its center lies within half a cell diagonal of a
    lane. Direction, elevation and curvature come from the nearest lane
    segment; the noise channel is seeded Gaussian noise.
    """
    cfg = cfg or BevConfig()
    window = BevWindow.from_config(cfg)
    for i, lane in enumerate(scene.lanes):
        if not window.contains(lane.points):
            raise GeometryError(f"lane {i} leaves the BEV window {cfg.x_range} x {cfg.y_range}")

    h, w = cfg.height, cfg.width
    dx = (cfg.x_range[1] - cfg.x_range[0]) / h
    dy = (cfg.y_range[1] - cfg.y_range[0]) / w
    reach = 0.5 * math.hypot(dx, dy)
    cells = cell_centers(cfg)
    grid = np.zeros((h * w, len(BEV_CHANNELS)), dtype=np.float64)

    if scene.lanes:
        starts = np.stack([lane.start[:2] for lane in scene.lanes])
        ends = np.stack([lane.end[:2] for lane in scene.lanes])
        best = np.full(h * w, np.inf)
        for lane in scene.lanes:
            pts = lane.points
            dist, t = _point_segment_distance(cells, pts[:-1, :2], pts[1:, :2])
            seg = dist.argmin(axis=1)
            near = dist[np.arange(len(cells)), seg]
            take = (near <= reach) & (near < best)
            if not take.any():
                continue
            best[take] = near[take]
            direction = pts[1:, :2] - pts[:-1, :2]
            heading = np.arctan2(direction[:, 1], direction[:, 0])
            frac = t[np.arange(len(cells)), seg]
            z = pts[seg, 2] + frac * (pts[seg + 1, 2] - pts[seg, 2])
            turning = np.abs(np.angle(np.exp(1j * np.diff(heading)))).sum() / max(lane.length(), 1e-9)
            grid[take, 0] = 1.0
            grid[take, 1] = np.sin(heading[seg[take]])
            grid[take, 2] = np.cos(heading[seg[take]])
            grid[take, 6] = z[take] / cfg.z_scale
            grid[take, 7] = turning
        grid[:, 3] = (np.linalg.norm(cells[:, None] - starts[None], axis=2) <= reach).any(axis=1)
        grid[:, 4] = (np.linalg.norm(cells[:, None] - ends[None], axis=2) <= reach).any(axis=1)

    if cfg.noise_std > 0:
        grid[:, 5] = np.random.default_rng(seed).normal(0.0, cfg.noise_std, size=h * w)
    return BevFeature(grid=grid.reshape(h, w, len(BEV_CHANNELS)), window=window)


def traffic_features(scene: SceneGraph) -> np.ndarray:
    """[N_T x 17]: box corners then one-hot attribute"""
    feats = np.zeros((scene.n_traffic, TRAFFIC_FEATURES))
    if scene.n_traffic:
        feats[:, :4] = scene.traffic_boxes()
        feats[np.arange(scene.n_traffic), 4 + scene.traffic_attrs()] = 1.0
    return feats


def init_traffic_stem(params: ParamStore, channels: int):
    params.linear("traffic_stem", TRAFFIC_FEATURES, channels)


def encode_traffic(scene: SceneGraph, params: ParamStore) -> TensorNode:
    """Embed each traffic element through the learned `traffic_stem` linear"""
    channels = params["traffic_stem.weight"].shape[1]
    if scene.n_traffic == 0:
        return TensorNode(np.zeros((0, channels), dtype=params.dtype))
    feats = TensorNode(traffic_features(scene).astype(params.dtype))
    return apply_linear(feats, params, "traffic_stem")


# ---------------------------------------------------------------------------
# JSON documents (schema v1)
# ---------------------------------------------------------------------------

class TrafficDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    box: Tuple[float, float, float, float]
    attr: int = Field(ge=0, lt=TRAFFIC_CLASSES)


class SceneDoc(BaseModel):
    """Scene JSON schema, version 1"""
    model_config = ConfigDict(extra="forbid")

    version: int
    lanes: List[List[Tuple[float, float, float]]]
    traffic: List[TrafficDoc]
    g_ll: List[List[int]]
    g_lt: List[List[int]]


def _json_path(loc: Sequence[Union[str, int]]) -> str:
    return "$" + "".join(f"[{part}]" if isinstance(part, int) else f".{part}" for part in loc)


def save(scene: SceneGraph) -> Dict[str, Any]:
    """Scene as a schema-v1 JSON-compatible document"""
    return {
        "version": SCHEMA_VERSION,
        "lanes": [[[float(v) for v in point] for point in lane.points] for lane in scene.lanes],
        "traffic": [{"box": [float(v) for v in t.box.as_tuple()], "attr": int(t.attr)} for t in scene.traffic],
        "g_ll": scene.g_ll.astype(int).tolist(),
        "g_lt": scene.g_lt.astype(int).tolist(),
    }


def dumps(scene: SceneGraph) -> str:
    return json.dumps(save(scene), indent=1)


def load(doc: Union[str, bytes, Dict[str, Any]]) -> SceneGraph:
    """Parse a schema-v1 document; errors carry the offending JSON path"""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise SceneParseError(f"invalid JSON: {e.msg}") from e
    if not isinstance(doc, dict):
        raise SceneParseError("scene document must be an object")
    if "version" not in doc:
        raise SceneParseError("missing required field", "$.version")
    if doc["version"] != SCHEMA_VERSION:
        raise UnsupportedVersionError(f"unsupported scene version {doc['version']!r}", "$.version")

    try:
        parsed = SceneDoc.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        raise SceneParseError(first["msg"], _json_path(first["loc"])) from e

    n_l, n_t = len(parsed.lanes), len(parsed.traffic)
    lanes, traffic = [], []
    for i, points in enumerate(parsed.lanes):
        try:
            lanes.append(Polyline3D(np.array(points, dtype=np.float64)))
        except GeometryError as e:
            raise SceneParseError(str(e), f"$.lanes[{i}]") from e
    for i, item in enumerate(parsed.traffic):
        try:
            traffic.append(TrafficElement(BBox2D(*item.box), item.attr))
        except LaneTopoError as e:
            raise SceneParseError(str(e), f"$.traffic[{i}].box") from e
    for name, rows, cols in (("g_ll", parsed.g_ll, n_l), ("g_lt", parsed.g_lt, n_t)):
        if len(rows) != n_l:
            raise SceneParseError(f"expected {n_l} rows, got {len(rows)}", f"$.{name}")
        for r, row in enumerate(rows):
            if len(row) != cols:
                raise SceneParseError(f"expected {cols} columns, got {len(row)}", f"$.{name}[{r}]")
            bad = [c for c, v in enumerate(row) if v not in (0, 1)]
            if bad:
                raise SceneParseError("entries must be 0 or 1", f"$.{name}[{r}][{bad[0]}]")

    scene = SceneGraph(lanes=lanes, traffic=traffic,
                       g_ll=np.array(parsed.g_ll, dtype=np.int8).reshape(n_l, n_l),
                       g_lt=np.array(parsed.g_lt, dtype=np.int8).reshape(n_l, n_t))
    if n_l and np.any(np.diag(scene.g_ll)):
        raise SceneParseError("self-connection on the diagonal", "$.g_ll")
    return scene


def save_scene(scene: SceneGraph, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(scene), encoding="utf-8")
    return path


def load_scene(path: Union[str, Path]) -> SceneGraph:
    path = Path(path)
    if not path.exists():
        raise SceneParseError(f"scene file {path} not found")
    return load(path.read_text(encoding="utf-8"))


def load_scene_dir(directory: Union[str, Path]) -> List[SceneGraph]:
    """Every *.json scene in a directory, sorted by file name"""
    directory = Path(directory)
    files = sorted(directory.glob("*.json"))
    scenes = [load_scene(f) for f in files]
    logger.info(f"Loaded {len(scenes)} scenes from {directory}")
    return scenes
