"""
Configuration management for LaneTopoLab
Validated run, scene, BEV, decoder and loss settings plus the flat
key = value file format used by the launcher.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigurationError

logger = logging.getLogger(__name__)

Template = Literal["straight", "fork", "merge", "intersection"]
DecoderMode = Literal["standard", "reordered", "naive_o2m", "group_o2m"]
Precision = Literal["float32", "float64"]

TRAFFIC_CLASSES = 13


class GeneratorConfig(BaseModel):
    """Procedural scene generator settings"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    templates: Tuple[Template, ...] = ("straight", "fork", "merge", "intersection")
    lane_min: int = Field(default=3, ge=1)
    lane_max: int = Field(default=7, ge=1)
    traffic_min: int = Field(default=1, ge=0)
    traffic_max: int = Field(default=4, ge=0)
    noise_std: float = Field(default=0.05, ge=0.0)
    points: int = Field(default=11, ge=2)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "GeneratorConfig":
        if not self.templates:
            raise ValueError("at least one template is required")
        if self.lane_min > self.lane_max:
            raise ValueError(f"lane bounds empty: [{self.lane_min}, {self.lane_max}]")
        if self.traffic_min > self.traffic_max:
            raise ValueError(f"traffic bounds empty: [{self.traffic_min}, {self.traffic_max}]")
        return self


class BevConfig(BaseModel):
    """Metric BEV window and raster size. Rows run along x, columns along y."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    height: int = Field(default=50, ge=1)
    width: int = Field(default=25, ge=1)
    channels: int = Field(default=8, ge=8, le=8)
    x_range: Tuple[float, float] = (-25.0, 25.0)
    y_range: Tuple[float, float] = (-12.5, 12.5)
    z_scale: float = Field(default=1.0, gt=0.0)
    noise_std: float = Field(default=0.1, ge=0.0)

    @model_validator(mode="after")
    def _check_window(self) -> "BevConfig":
        if self.x_range[0] >= self.x_range[1] or self.y_range[0] >= self.y_range[1]:
            raise ValueError(f"empty BEV window x={self.x_range} y={self.y_range}")
        return self


class DecoderConfig(BaseModel):
    """Lane decoder architecture"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: int = Field(default=3, ge=1)
    queries: int = Field(default=60, ge=1)
    traffic_queries: int = Field(default=20, ge=1)
    traffic_layers: int = Field(default=2, ge=1)
    channels: int = Field(default=64, ge=1)
    heads: int = Field(default=4, ge=1)
    parallel_blocks: int = Field(default=4, ge=1)
    mode: DecoderMode = "reordered"
    groups: int = Field(default=3, ge=1)
    ffn_hidden: Optional[int] = None
    points: int = Field(default=11, ge=2)
    traffic_classes: int = TRAFFIC_CLASSES
    bev_height: int = 50
    bev_width: int = 25
    bev_channels: int = 8
    precision: Precision = "float32"

    @model_validator(mode="after")
    def _check_shapes(self) -> "DecoderConfig":
        if self.channels % self.heads != 0:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.mode == "group_o2m" and self.queries % self.groups != 0:
            raise ValueError(f"queries {self.queries} not divisible into {self.groups} groups")
        return self

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 4 * self.channels

    @property
    def group_size(self) -> int:
        return self.queries // self.groups if self.mode == "group_o2m" else self.queries

    @property
    def dtype(self) -> str:
        return self.precision


class LossWeights(BaseModel):
    """Loss and matching-cost weights"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_l: float = Field(default=1.0, ge=0.0)
    lambda_t: float = Field(default=1.0, ge=0.0)
    lambda_ll: float = Field(default=5.0, ge=0.0)
    lambda_lt: float = Field(default=5.0, ge=0.0)
    lambda_o2m: float = Field(default=2.0, ge=0.0)
    focal_alpha: float = Field(default=0.25, ge=0.0, le=1.0)
    focal_gamma: float = Field(default=2.0, ge=0.0)
    cost_cls: float = Field(default=1.0, ge=0.0)
    cost_reg: float = Field(default=1.0, ge=0.0)
    cost_giou: float = Field(default=1.0, ge=0.0)


class RunConfig(BaseModel):
    """One training run. Serializes losslessly to the flat config format."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: DecoderMode = "reordered"
    k: int = Field(default=3, ge=1)
    m: int = Field(default=4, ge=1)
    layers: int = Field(default=3, ge=1)
    queries: int = Field(default=60, ge=1)
    traffic_queries: int = Field(default=20, ge=1)
    channels: int = Field(default=64, ge=1)
    heads: int = Field(default=4, ge=1)
    groups: int = Field(default=3, ge=1)
    lr: float = Field(default=2e-4, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    steps: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=4, ge=1)
    seeds: Tuple[int, ...] = (0,)
    pool_size: int = Field(default=10, ge=1)
    eval_scenes: int = Field(default=20, ge=1)
    precision: Precision = "float32"
    supervision: Literal["valid_only", "full"] = "valid_only"
    aux_reduction: Literal["sum", "mean"] = "sum"
    log_every: int = Field(default=50, ge=1)
    output_dir: str = "output"
    scene: GeneratorConfig = GeneratorConfig()
    bev: BevConfig = BevConfig()
    loss: LossWeights = LossWeights()

    @model_validator(mode="after")
    def _check_run(self) -> "RunConfig":
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.batch_size > self.pool_size:
            raise ValueError(f"batch_size {self.batch_size} exceeds pool_size {self.pool_size}")
        decoder = self.decoder_config()
        lane_max = self.scene.lane_max
        if self.mode in ("reordered", "naive_o2m") and self.k * lane_max > self.queries:
            raise ValueError(f"k * scene.lane_max = {self.k}*{lane_max} = {self.k * lane_max} "
                             f"exceeds queries = {self.queries}")
        if lane_max > decoder.group_size:
            name = "queries // groups" if self.mode == "group_o2m" else "queries"
            raise ValueError(f"scene.lane_max = {lane_max} exceeds {name} = {decoder.group_size}")
        if self.scene.traffic_max > self.traffic_queries:
            raise ValueError(f"scene.traffic_max = {self.scene.traffic_max} exceeds "
                             f"traffic_queries = {self.traffic_queries}")
        return self

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            layers=self.layers,
            queries=self.queries,
            traffic_queries=self.traffic_queries,
            channels=self.channels,
            heads=self.heads,
            parallel_blocks=self.m,
            mode=self.mode,
            groups=self.groups,
            points=self.scene.points,
            bev_height=self.bev.height,
            bev_width=self.bev.width,
            bev_channels=self.bev.channels,
            precision=self.precision,
        )

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Return a validated copy with top-level or dotted-key overrides"""
        data = self.model_dump()
        for key, value in overrides.items():
            _assign(data, key.replace("__", "."), value)
        return build_run_config(data)


_SECTIONS = {"scene": GeneratorConfig, "bev": BevConfig, "loss": LossWeights}


def _assign(data: Dict[str, Any], key: str, value: Any):
    if "." in key:
        section, field = key.split(".", 1)
        data.setdefault(section, {})[field] = value
    else:
        data[key] = value


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a nested dict into a RunConfig, raising ConfigurationError"""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigurationError(f"{key}: {first['msg']}") from e


def _known_keys() -> Dict[str, Any]:
    keys: Dict[str, Any] = {}
    for name, field in RunConfig.model_fields.items():
        if name in _SECTIONS:
            for sub, sub_field in _SECTIONS[name].model_fields.items():
                keys[f"{name}.{sub}"] = sub_field.annotation
        else:
            keys[name] = field.annotation
    return keys


def _is_sequence(annotation: Any) -> bool:
    origin = getattr(annotation, "__origin__", None)
    return origin in (tuple, list, Tuple, List)


def parse_run_config(text: str) -> RunConfig:
    """Parse flat key = value text. Unknown keys are hard errors."""
    known = _known_keys()
    data: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if _is_sequence(known[key]):
            parsed: Union[str, List[str]] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            parsed = value
        _assign(data, key, parsed)
    return build_run_config(data)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Load a run configuration file"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    cfg = parse_run_config(path.read_text(encoding="utf-8"))
    logger.info(f"Configuration loaded from {path}")
    return cfg


def _format_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_run_config(cfg: RunConfig) -> str:
    """Write every key so that parse_run_config(dump_run_config(c)) == c"""
    lines = []
    data = cfg.model_dump()
    for name in RunConfig.model_fields:
        if name in _SECTIONS:
            for sub, value in data[name].items():
                lines.append(f"{name}.{sub} = {_format_value(value)}")
        else:
            lines.append(f"{name} = {_format_value(data[name])}")
    return "\n".join(lines) + "\n"
