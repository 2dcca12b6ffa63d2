"""
Lane Decoder for LaneTopoLab
Transformer-style lane decoder in four modes (standard, reordered with
parallel cross-attention taps, naive one-to-many, grouped one-to-many) and
the lane, traffic and topology prediction heads.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from config import DecoderConfig
from errors import ConfigurationError, DimensionError
from geometry import BevWindow
from numerics import (ParamStore, TensorNode, add, apply_linear, apply_norm, attention, concat, ffn,
                      gelu, getitem, init_attention, init_ffn, matmul, mul, reshape, sigmoid, sub)
from scene import BevFeature, init_traffic_stem


@dataclass
class Predictions:
    """
    Head outputs for one query set. Lane points are kept in normalized
    window units; `lane_points` rescales them to meters.
    """
    lane_logits: TensorNode
    lane_points_norm: TensorNode
    traffic_logits: TensorNode
    traffic_boxes: TensorNode
    topo_ll: TensorNode
    topo_lt: TensorNode
    window: BevWindow = field(default_factory=BevWindow)

    @property
    def n_lanes(self) -> int:
        return self.lane_logits.shape[0]

    @property
    def n_traffic(self) -> int:
        return self.traffic_logits.shape[0]

    @property
    def lane_points(self) -> np.ndarray:
        return self.window.denormalize(self.lane_points_norm.values)

    def lane_scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.lane_logits.values.astype(np.float64)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(node.values)) for node in
                   (self.lane_logits, self.lane_points_norm, self.traffic_logits,
                    self.traffic_boxes, self.topo_ll, self.topo_lt))


@dataclass
class DecoderOutput:
    """Query states of one forward pass plus the auxiliary prediction sets"""
    final_queries: TensorNode
    layer_outputs: List[TensorNode]
    taps: List[List[TensorNode]]
    traffic_queries: TensorNode
    layer_predictions: List[Predictions] = field(default_factory=list)
    tap_predictions: List[List[Predictions]] = field(default_factory=list)
    group_predictions: List[List[Predictions]] = field(default_factory=list)
    sa_mask: Optional[np.ndarray] = None

    @property
    def tap_count(self) -> int:
        return sum(len(layer) for layer in self.taps)


# ---------------------------------------------------------------------------
# Parameter registration
# ---------------------------------------------------------------------------

def init_standard_layer(params: ParamStore, prefix: str, channels: int, hidden: int):
    init_attention(params, f"{prefix}.sa.attn", channels)
    params.norm(f"{prefix}.sa.norm", channels)
    init_attention(params, f"{prefix}.ca.0.attn", channels)
    params.norm(f"{prefix}.ca.0.norm", channels)
    init_ffn(params, f"{prefix}.ffn", channels, hidden)
    params.norm(f"{prefix}.ffn.norm", channels)


def init_reordered_layer(params: ParamStore, prefix: str, channels: int, hidden: int, blocks: int):
    for m in range(blocks):
        init_attention(params, f"{prefix}.ca.{m}.attn", channels)
        params.norm(f"{prefix}.ca.{m}.norm", channels)
    params.linear(f"{prefix}.fuse", blocks * channels, channels, init="identity" if blocks == 1 else "uniform")
    init_attention(params, f"{prefix}.sa.attn", channels)
    params.norm(f"{prefix}.sa.norm", channels)
    init_ffn(params, f"{prefix}.ffn", channels, hidden)
    params.norm(f"{prefix}.ffn.norm", channels)


def init_topo_head(params: ParamStore, prefix: str, channels: int):
    params.linear(f"{prefix}.left", channels, channels)
    params.uniform(f"{prefix}.right.weight", (channels, channels), 1.0 / np.sqrt(channels))
    params.linear(f"{prefix}.out", channels, 1)


def _init_lane_heads(params: ParamStore, suffix: str, config: DecoderConfig):
    c = config.channels
    params.linear(f"lane_head{suffix}.cls", c, 1)
    params.linear(f"lane_head{suffix}.reg.fc1", c, c)
    params.linear(f"lane_head{suffix}.reg.fc2", c, config.points * 3)
    init_topo_head(params, f"topo_ll{suffix}", c)
    init_topo_head(params, f"topo_lt{suffix}", c)


def init_params(config: DecoderConfig, params: ParamStore) -> ParamStore:
    """Register every decoder, head and stem parameter for `config`"""
    c, hidden = config.channels, config.hidden
    params.linear("bev_stem", config.bev_channels, c)
    params.normal("bev_pos", (config.bev_height * config.bev_width, c), 0.02)
    params.normal("lane_queries", (config.queries, c), 0.02)
    for i in range(config.layers):
        if config.mode == "reordered":
            init_reordered_layer(params, f"layers.{i}", c, hidden, config.parallel_blocks)
        else:
            init_standard_layer(params, f"layers.{i}", c, hidden)

    init_traffic_stem(params, c)
    params.normal("traffic_queries", (config.traffic_queries, c), 0.02)
    for i in range(config.traffic_layers):
        init_standard_layer(params, f"traffic_decoder.layers.{i}", c, hidden)
    params.linear("traffic_head.cls", c, config.traffic_classes)
    params.linear("traffic_head.box.fc1", c, c)
    params.linear("traffic_head.box.fc2", c, 4)

    _init_lane_heads(params, "", config)
    if config.mode == "group_o2m":
        for g in range(1, config.groups):
            _init_lane_heads(params, f".g{g}", config)
    return params


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def standard_layer(q: TensorNode, keys: TensorNode, values: TensorNode, params: ParamStore,
                   prefix: str, heads: int, sa_mask: Optional[np.ndarray] = None) -> TensorNode:
    """SA -> CA -> FFN, each wrapped as LN(sublayer(x) + x)"""
    x = apply_norm(add(attention(q, q, q, heads, params, f"{prefix}.sa.attn", sa_mask), q),
                   params, f"{prefix}.sa.norm")
    x = apply_norm(add(attention(x, keys, values, heads, params, f"{prefix}.ca.0.attn"), x),
                   params, f"{prefix}.ca.0.norm")
    return apply_norm(add(ffn(x, params, f"{prefix}.ffn"), x), params, f"{prefix}.ffn.norm")


def reordered_layer(q: TensorNode, keys: TensorNode, values: TensorNode, params: ParamStore,
                    prefix: str, heads: int, blocks: int,
                    sa_mask: Optional[np.ndarray] = None) -> Tuple[TensorNode, List[TensorNode]]:
    """
    Parallel cross-attention blocks first, then fusion, SA and FFN.

    Each block m produces a tap LN_m(CA_m(q, F) + q). The taps are
    concatenated along channels and projected back by the fusion linear.
    """
    if blocks < 1:
        raise ConfigurationError(f"reordered layer needs at least one block, got {blocks}")
    taps = [apply_norm(add(attention(q, keys, values, heads, params, f"{prefix}.ca.{m}.attn"), q),
                       params, f"{prefix}.ca.{m}.norm")
            for m in range(blocks)]
    fused = apply_linear(concat(taps, axis=1), params, f"{prefix}.fuse")
    x = apply_norm(add(attention(fused, fused, fused, heads, params, f"{prefix}.sa.attn", sa_mask), fused),
                   params, f"{prefix}.sa.norm")
    x = apply_norm(add(ffn(x, params, f"{prefix}.ffn"), x), params, f"{prefix}.ffn.norm")
    return x, taps


def topo_head(q_a: TensorNode, q_b: TensorNode, params: ParamStore, prefix: str = "topo_ll") -> TensorNode:
    """
    Pairwise MLP logits [N_a x N_b]. The first layer acts on the
    concatenation [q_a[r], q_b[s]], computed as q_a W_left + q_b W_right.
    """
    if q_a.shape[1] != q_b.shape[1]:
        raise DimensionError(f"topology head channel mismatch: {q_a.shape[1]} vs {q_b.shape[1]}")
    n_a, n_b, channels = q_a.shape[0], q_b.shape[0], q_a.shape[1]
    if n_a == 0 or n_b == 0:
        return TensorNode(np.zeros((n_a, n_b), dtype=q_a.dtype))
    left = reshape(apply_linear(q_a, params, f"{prefix}.left"), (n_a, 1, channels))
    right = reshape(matmul(q_b, params[f"{prefix}.right.weight"]), (1, n_b, channels))
    hidden = reshape(gelu(add(left, right)), (n_a * n_b, channels))
    return reshape(apply_linear(hidden, params, f"{prefix}.out"), (n_a, n_b))


def group_mask(queries: int, groups: int) -> np.ndarray:
    """Block-diagonal self-attention mask keeping queries inside their group"""
    if groups < 1 or queries % groups != 0:
        raise ConfigurationError(f"{queries} queries cannot form {groups} equal groups")
    size = queries // groups
    return np.kron(np.eye(groups, dtype=bool), np.ones((size, size), dtype=bool))


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def _traffic_head(tq: TensorNode, params: ParamStore, classes: int) -> Tuple[TensorNode, TensorNode]:
    if tq.shape[0] == 0:
        return (TensorNode(np.zeros((0, classes), dtype=tq.dtype)), TensorNode(np.zeros((0, 4), dtype=tq.dtype)))
    logits = apply_linear(tq, params, "traffic_head.cls")
    raw = apply_linear(gelu(apply_linear(tq, params, "traffic_head.box.fc1")), params, "traffic_head.box.fc2")
    cxcywh = sigmoid(raw)
    center = getitem(cxcywh, (slice(None), slice(0, 2)))
    half = mul(getitem(cxcywh, (slice(None), slice(2, 4))), 0.5)
    return logits, concat([sub(center, half), add(center, half)], axis=1)


def _lane_predictions(q: TensorNode, tq: TensorNode, traffic: Tuple[TensorNode, TensorNode],
                      params: ParamStore, config: DecoderConfig, window: BevWindow,
                      suffix: str = "") -> Predictions:
    n = q.shape[0]
    logits = reshape(apply_linear(q, params, f"lane_head{suffix}.cls"), (n,))
    points = apply_linear(gelu(apply_linear(q, params, f"lane_head{suffix}.reg.fc1")),
                          params, f"lane_head{suffix}.reg.fc2")
    return Predictions(
        lane_logits=logits,
        lane_points_norm=reshape(points, (n, config.points, 3)),
        traffic_logits=traffic[0],
        traffic_boxes=traffic[1],
        topo_ll=topo_head(q, q, params, f"topo_ll{suffix}"),
        topo_lt=topo_head(q, tq, params, f"topo_lt{suffix}"),
        window=window,
    )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def bev_memory(config: DecoderConfig, F: Union[BevFeature, np.ndarray],
               params: ParamStore) -> Tuple[TensorNode, TensorNode]:
    """Flatten the BEV grid into (H*W) x C values; keys add the positional table"""
    grid = F.grid if isinstance(F, BevFeature) else np.asarray(F)
    expected = (config.bev_height, config.bev_width, config.bev_channels)
    if grid.shape != expected:
        raise DimensionError(f"BEV feature shape {list(grid.shape)} != configured {list(expected)}")
    flat = TensorNode(grid.reshape(-1, grid.shape[2]).astype(params.dtype))
    values = apply_linear(flat, params, "bev_stem")
    return add(values, params["bev_pos"]), values


def forward(config: DecoderConfig, F: Union[BevFeature, np.ndarray], traffic_feats: TensorNode,
            params: ParamStore, training: bool = False,
            window: Optional[BevWindow] = None) -> Tuple[DecoderOutput, Predictions]:
    """
    Run the lane and traffic decoders and apply the heads.

    With training=True the heads are also applied to every layer output
    (deep supervision), to every tap in reordered mode, and to every query
    group at every layer in group_o2m mode.
    """
    window = window or BevWindow()
    keys, values = bev_memory(config, F, params)

    # traffic path: plain decoder over the embedded elements
    if traffic_feats.shape[0] == 0:
        tq = TensorNode(np.zeros((0, config.channels), dtype=params.dtype))
    else:
        tq = params["traffic_queries"]
        for i in range(config.traffic_layers):
            tq = standard_layer(tq, traffic_feats, traffic_feats, params,
                                f"traffic_decoder.layers.{i}", config.heads)
    traffic = _traffic_head(tq, params, config.traffic_classes)

    sa_mask = group_mask(config.queries, config.groups) if config.mode == "group_o2m" else None
    q = params["lane_queries"]
    layer_outputs: List[TensorNode] = []
    taps: List[List[TensorNode]] = []
    for i in range(config.layers):
        prefix = f"layers.{i}"
        if config.mode == "reordered":
            q, layer_taps = reordered_layer(q, keys, values, params, prefix, config.heads,
                                            config.parallel_blocks, sa_mask)
            taps.append(layer_taps)
        else:
            q = standard_layer(q, keys, values, params, prefix, config.heads, sa_mask)
        layer_outputs.append(q)

    output = DecoderOutput(final_queries=q, layer_outputs=layer_outputs, taps=taps,
                           traffic_queries=tq, sa_mask=sa_mask)

    if config.mode == "group_o2m":
        size = config.group_size
        groups = range(config.groups) if training else range(1)
        layers = layer_outputs if training else layer_outputs[-1:]
        output.group_predictions = [
            [_lane_predictions(getitem(out, slice(g * size, (g + 1) * size)), tq, traffic, params,
                               config, window, f".g{g}" if g else "")
             for out in layers]
            for g in groups
        ]
        predictions = output.group_predictions[0][-1]
        if training:
            output.layer_predictions = output.group_predictions[0]
        return output, predictions

    predictions = _lane_predictions(q, tq, traffic, params, config, window)
    if training:
        output.layer_predictions = [_lane_predictions(out, tq, traffic, params, config, window)
                                    for out in layer_outputs[:-1]] + [predictions]
        output.tap_predictions = [[_lane_predictions(tap, tq, traffic, params, config, window)
                                   for tap in layer_taps] for layer_taps in taps]
    return output, predictions


class LaneDecoder:
    """Decoder parameters bound to a config"""

    def __init__(self, config: DecoderConfig, seed: int = 0, params: Optional[ParamStore] = None,
                 window: Optional[BevWindow] = None):
        self.config = config
        self.window = window or BevWindow()
        self.logger = logging.getLogger(__name__)
        if params is None:
            params = init_params(config, ParamStore(seed, config.precision))
            self.logger.debug(f"Initialized {config.mode} decoder with {params.count():,} parameters")
        self.params = params

    def forward(self, F: Union[BevFeature, np.ndarray], traffic_feats: TensorNode,
                training: bool = False) -> Tuple[DecoderOutput, Predictions]:
        return forward(self.config, F, traffic_feats, self.params, training, self.window)

    def parameter_count(self, prefix: str = "") -> int:
        return self.params.count(prefix)
