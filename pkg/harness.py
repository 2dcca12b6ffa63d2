"""
Experiment Harness for LaneTopoLab
Training loop, checkpoint evaluation, the ablation grid and its reports.

Runs are bit-deterministic for a fixed RunConfig: the scene pool depends
only on the generator settings, initialization on the run seed, and the
batch order on (run seed, step).
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from checkpoint import load_checkpoint, save_checkpoint
from config import RunConfig, build_run_config
from decoder import LaneDecoder, init_params
from errors import CheckpointVersionError, ConfigurationError, DivergenceError, UsageError
from geometry import BevWindow
from losses import Criterion, LossBreakdown
from metrics import MetricsReport, ScenePrediction, evaluate_predictions
from numerics import ParamStore, add, backward, mul, no_grad
from optimizer import AdamW
from scene import SceneGraph, encode_traffic, rasterize, scene_pool

logger = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_000
METRIC_COLUMNS = ["top_ll", "top_lt", "det_l", "det_t", "ols"]
CHECKPOINT_NAME = "checkpoint.ltck"

# Ablation axes: cell label -> config overrides
MODE_CELLS = {
    "baseline_o2o": {"mode": "standard"},
    "naive_o2m": {"mode": "naive_o2m"},
    "group_o2m": {"mode": "group_o2m"},
    "reordered": {"mode": "reordered"},
}
K_VALUES = (1, 2, 3, 4, 5)
M_VALUES = (1, 2, 4, 6)


def component_cells(base: RunConfig) -> Dict[str, Dict[str, Any]]:
    """Cumulative component rows, from the fully supervised baseline to the complete method"""
    return {
        "full_supervision": {"mode": "standard", "supervision": "full"},
        "valid_only": {"mode": "standard", "supervision": "valid_only"},
        "reorder": {"mode": "reordered", "m": 1, "loss.lambda_o2m": 0.0},
        "lane_o2m": {"mode": "reordered", "m": 1},
        "multi_ca": {"mode": "reordered", "m": base.m, "loss.lambda_o2m": 0.0},
        "lane_o2m_multi_ca": {"mode": "reordered", "m": base.m},
    }


def ablation_cells(base: RunConfig, axis: str) -> Dict[Any, Dict[str, Any]]:
    if axis == "mode":
        return dict(MODE_CELLS)
    if axis == "k":
        return {k: {"mode": "reordered", "k": k} for k in K_VALUES}
    if axis == "m":
        return {m: {"mode": "reordered", "m": m} for m in M_VALUES}
    if axis == "component":
        return component_cells(base)
    raise UsageError(f"unknown ablation axis {axis!r}; expected mode, k, m or component")


@dataclass
class RunRecord:
    """Artifacts and results of one training run"""
    config: Dict[str, Any]
    seed: int
    losses: List[Dict[str, float]] = field(default_factory=list)
    report: Optional[Dict[str, Any]] = None
    wall_clock: float = 0.0
    checkpoint_path: str = ""
    checkpoint_hash: str = ""
    parameter_count: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.losses)

    def save_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load_json(cls, path: Union[str, Path]) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def parameter_count(cfg: RunConfig) -> int:
    """Scalar parameter count of the decoder a config builds"""
    return init_params(cfg.decoder_config(), ParamStore(0, cfg.precision)).count()


class Trainer:
    """
    One training run over a fixed scene pool. Each step draws a batch from
    the pool, averages the per-scene objectives and takes one AdamW step.
    """

    def __init__(self, cfg: RunConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.window = BevWindow.from_config(cfg.bev)
        self.decoder = LaneDecoder(cfg.decoder_config(), self.seed, window=self.window)
        self.criterion = Criterion(cfg.loss, cfg.mode, cfg.k, cfg.supervision, cfg.aux_reduction)
        self.optimizer = AdamW(self.decoder.params, cfg.lr, cfg.weight_decay)
        self.logger = logging.getLogger(__name__)

        self.pool = scene_pool(cfg.scene, cfg.pool_size)
        self.features = [rasterize(scene, cfg.bev, seed=i) for i, scene in enumerate(self.pool)]
        self.history: List[Dict[str, float]] = []
        self.logger.info(f"Scene pool built: {len(self.pool)} scenes, "
                         f"{sum(s.n_lanes for s in self.pool)} lanes; "
                         f"{self.decoder.parameter_count():,} parameters in {cfg.mode} mode")

    def batch_indices(self, step: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, step])
        return rng.choice(len(self.pool), size=self.cfg.batch_size, replace=False)

    def _check_valid_count(self, output, scene: SceneGraph, breakdown: LossBreakdown):
        expected = output.tap_count * (self.cfg.k * scene.n_lanes) ** 2
        self.logger.debug(f"valid o2m LL entries {breakdown.valid_ll_o2m} over {output.tap_count} taps")
        if breakdown.valid_ll_o2m != expected:
            raise AssertionError(f"valid o2m LL entries {breakdown.valid_ll_o2m} != "
                                 f"taps x (K * N_L)^2 = {expected}")

    def scene_loss(self, index: int):
        scene = self.pool[index]
        traffic = encode_traffic(scene, self.decoder.params)
        output, predictions = self.decoder.forward(self.features[index], traffic, training=True)
        loss, breakdown = self.criterion(output, predictions, scene)
        if self.cfg.mode == "reordered":
            self._check_valid_count(output, scene, breakdown)
        return loss, breakdown

    def step(self, step: int) -> Dict[str, float]:
        self.optimizer.zero_grad()
        total, breakdowns = None, []
        batch = self.batch_indices(step)
        for index in batch:
            loss, breakdown = self.scene_loss(int(index))
            total = loss if total is None else add(total, loss)
            breakdowns.append(breakdown)
        total = mul(total, 1.0 / len(batch))

        value = float(total.values)
        if not np.isfinite(value):
            self.logger.error(f"Loss diverged at step {step}: {value}")
            raise DivergenceError(step, self.history[-5:])
        backward(total)
        self.optimizer.step()

        row = {"step": step, **LossBreakdown.mean(breakdowns).as_dict()}
        row["total"] = value
        self.history.append(row)
        if step % self.cfg.log_every == 0 or step == self.cfg.steps - 1:
            self.logger.info(f"step {step}/{self.cfg.steps}: total {value:.4f} "
                             f"det {row['detection']:.4f} o2o {row['topo_o2o']:.4f} o2m {row['topo_o2m']:.4f}")
        return row

    def fit(self) -> List[Dict[str, float]]:
        for step in range(self.cfg.steps):
            self.step(step)
        return self.history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def predict_scenes(decoder: LaneDecoder, scenes: Sequence[SceneGraph], bev) -> List[ScenePrediction]:
    predictions = []
    with no_grad():
        for i, scene in enumerate(scenes):
            traffic = encode_traffic(scene, decoder.params)
            _, preds = decoder.forward(rasterize(scene, bev, seed=i), traffic)
            predictions.append(ScenePrediction.from_predictions(preds))
    return predictions


def evaluate_predictor(predict: Callable[[SceneGraph], ScenePrediction],
                       scenes: Sequence[SceneGraph]) -> MetricsReport:
    """Score any scene -> prediction function, e.g. a ground-truth oracle"""
    if not scenes:
        raise UsageError("cannot evaluate an empty scene list")
    return evaluate_predictions([predict(scene) for scene in scenes], scenes)


def load_decoder(checkpoint: Union[str, Path]) -> Tuple[RunConfig, LaneDecoder]:
    """Rebuild the decoder stored in a checkpoint, checking its registry against the config"""
    header, _ = load_checkpoint(checkpoint)
    try:
        cfg = build_run_config(header["config"])
    except (ConfigurationError, KeyError, TypeError) as e:
        raise CheckpointVersionError(f"checkpoint config is not valid for this version: {e}") from e
    _, params = load_checkpoint(checkpoint, cfg.precision)
    reference = init_params(cfg.decoder_config(), ParamStore(0, cfg.precision))
    stored = {name: node.shape for name, node in params.items()}
    expected = {name: node.shape for name, node in reference.items()}
    if stored != expected:
        missing = sorted(set(expected) - set(stored))[:5]
        unexpected = sorted(set(stored) - set(expected))[:5]
        raise CheckpointVersionError(f"checkpoint parameters do not match its config; "
                                     f"missing={missing} unexpected={unexpected}")
    window = BevWindow.from_config(cfg.bev)
    return cfg, LaneDecoder(cfg.decoder_config(), header.get("seed", 0), params=params, window=window)


def evaluate(checkpoint: Union[str, Path], scenes: Sequence[SceneGraph]) -> MetricsReport:
    """Pure inference from a checkpoint followed by the metric suite"""
    if not scenes:
        raise UsageError("cannot evaluate an empty scene list")
    cfg, decoder = load_decoder(checkpoint)
    return evaluate_predictions(predict_scenes(decoder, scenes, cfg.bev), scenes)


def evaluation_scenes(cfg: RunConfig) -> List[SceneGraph]:
    """Held-out scenes from a seed range disjoint from the training pool"""
    return scene_pool(cfg.scene, cfg.eval_scenes, seed=EVAL_SEED_OFFSET)


# ---------------------------------------------------------------------------
# Training entry point
# ---------------------------------------------------------------------------

def train(cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
          evaluate_after: bool = True) -> RunRecord:
    """
    Train one run and write its checkpoint, loss CSV and RunRecord JSON to
    `out_dir` (default: cfg.output_dir).
    """
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    trainer = Trainer(cfg, seed)
    trainer.fit()
    checkpoint_path = out / CHECKPOINT_NAME
    digest = save_checkpoint(checkpoint_path, trainer.decoder.params, cfg.model_dump(mode="json"), seed)

    record = RunRecord(
        config=cfg.model_dump(mode="json"),
        seed=seed,
        losses=trainer.history,
        checkpoint_path=str(checkpoint_path),
        checkpoint_hash=digest,
        parameter_count=trainer.decoder.parameter_count(),
    )
    record.loss_frame().to_csv(out / "losses.csv", index=False)
    if evaluate_after:
        scenes = evaluation_scenes(cfg)
        report = evaluate_predictions(predict_scenes(trainer.decoder, scenes, cfg.bev), scenes)
        record.report = report.to_dict()
        report.save_json(out / "report.json")
    record.wall_clock = time.perf_counter() - started
    record.save_json(out / "run.json")
    logger.info(f"Run finished in {record.wall_clock:.1f}s; checkpoint {digest[:12]}")
    return record


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

def _run_cell(cfg_data: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
    cfg = build_run_config(cfg_data)
    return train(cfg, out_dir).to_dict()


@dataclass
class TrendCheck:
    """One directional ordering expected of an ablation axis"""
    name: str
    holds: bool
    detail: str


@dataclass
class AblationResult:
    axis: str
    frame: pd.DataFrame
    medians: pd.DataFrame
    trends: List[TrendCheck] = field(default_factory=list)
    records: List[Dict[str, Any]] = field(default_factory=list)


def _unimodal(values: Sequence[float]) -> bool:
    peak = int(np.argmax(values))
    rising = all(a <= b for a, b in zip(values[:peak], values[1:peak + 1]))
    falling = all(a >= b for a, b in zip(values[peak:], values[peak + 1:]))
    return rising and falling


def check_trends(axis: str, medians: Dict[Any, float], tolerance: float = 0.01) -> List[TrendCheck]:
    """
    Directional orderings of median TOP_ll (scores in [0, 1]; `tolerance`
    is one point).
    """
    checks: List[TrendCheck] = []
    if axis == "mode":
        ours, group, base, naive = (medians[k] for k in ("reordered", "group_o2m", "baseline_o2o", "naive_o2m"))
        checks.append(TrendCheck("reordered > group_o2m > baseline_o2o", ours > group > base,
                                 f"{ours:.4f} / {group:.4f} / {base:.4f}"))
        checks.append(TrendCheck("naive_o2m within one point of baseline_o2o", abs(naive - base) <= tolerance,
                                 f"difference {naive - base:+.4f}"))
    elif axis == "k":
        keys = sorted(medians)
        values = [medians[k] for k in keys]
        peak = keys[int(np.argmax(values))]
        checks.append(TrendCheck("unimodal with peak at K in {2, 3, 4}", _unimodal(values) and peak in (2, 3, 4),
                                 f"peak at K={peak}"))
    elif axis == "m":
        keys = [m for m in sorted(medians) if m <= 4]
        values = [medians[m] for m in keys]
        checks.append(TrendCheck("non-decreasing from M=1 to M=4", all(a <= b for a, b in zip(values, values[1:])),
                                 ", ".join(f"M={m}: {v:.4f}" for m, v in zip(keys, values))))
    for check in checks:
        if not check.holds:
            logger.warning(f"Ablation trend not met on {axis}: {check.name} ({check.detail})")
    return checks


def plot_ablation(medians: pd.DataFrame, axis: str, path: Union[str, Path]) -> Path:
    """Median TOP_ll and TOP_lt against the axis value, as SVG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.style.use("seaborn-v0_8")
    sns.set_palette(["#3498db", "#e74c3c"])
    long = medians.assign(**{axis: medians[axis].astype(str)}).melt(
        id_vars=[axis], value_vars=["top_ll", "top_lt"], var_name="metric", value_name="median")
    fig, ax = plt.subplots(figsize=(6, 4))
    sns.lineplot(data=long, x=axis, y="median", hue="metric", marker="o", sort=False, ax=ax)
    ax.set_xlabel(axis)
    ax.set_ylabel("median score")
    ax.set_title(f"Topology scores over the {axis} axis")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def ablate(base: RunConfig, axis: str, seeds: Optional[Sequence[int]] = None,
           out_dir: Optional[Union[str, Path]] = None, workers: int = 1, plot: bool = True) -> AblationResult:
    """
    One training run per (cell, seed). Writes ablation.csv, medians.csv and
    optionally an SVG plot; runs in `workers` processes when > 1.
    """
    seeds = list(seeds or base.seeds)
    out = Path(out_dir or base.output_dir) / f"ablate_{axis}"
    cells = ablation_cells(base, axis)

    if axis == "mode":
        counts = {label: parameter_count(base.with_overrides(**cells[label]))
                  for label in ("baseline_o2o", "naive_o2m")}
        if len(set(counts.values())) != 1:
            raise AssertionError(f"naive_o2m and baseline_o2o parameter counts differ: {counts}")

    jobs = []
    for label, overrides in cells.items():
        for seed in seeds:
            cfg = base.with_overrides(**overrides, seeds=[seed])
            jobs.append((label, seed, cfg.model_dump(mode="json"), str(out / f"{label}" / f"seed{seed}")))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_run_cell, data, path) for _, _, data, path in jobs]
            records = [future.result() for future in futures]
    else:
        records = [_run_cell(data, path) for _, _, data, path in jobs]

    rows = []
    for (label, seed, _, _), record in zip(jobs, records):
        report = record["report"]
        rows.append({axis: label, "seed": seed, **{k: report[k] for k in METRIC_COLUMNS}})
        logger.info(f"Ablation cell {axis}={label} seed {seed}: TOP_ll {report['top_ll']:.4f} OLS {report['ols']:.4f}")

    frame = pd.DataFrame(rows, columns=[axis, "seed"] + METRIC_COLUMNS)
    medians = frame.groupby(axis, sort=False)[METRIC_COLUMNS].median().reset_index()
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "ablation.csv", index=False)
    medians.to_csv(out / "medians.csv", index=False)
    trends = check_trends(axis, dict(zip(medians[axis], medians["top_ll"])))
    if plot:
        plot_ablation(medians, axis, out / f"ablation_{axis}.svg")
    return AblationResult(axis=axis, frame=frame, medians=medians, trends=trends, records=records)
