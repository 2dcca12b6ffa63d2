"""
Gradient Checks for LaneTopoLab
Central finite-difference verification of the reverse pass, for single
operations and for composed decoder layers, at 64-bit precision.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from decoder import (init_reordered_layer, init_standard_layer, init_topo_head, reordered_layer,
                     standard_layer, topo_head)
from geometry import giou_loss
from losses import focal_loss
from numerics import (ParamStore, TensorNode, attention, backward, ffn, init_attention, init_ffn,
                      layer_norm, matmul, mul, no_grad, softmax, sum_)

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5
MAX_DIM = 8
HEADS = 2


@dataclass
class GradcheckResult:
    """Outcome of one checked case"""
    name: str
    trial: int
    rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, tiny: float = 1e-12) -> float:
    """||a - n|| / max(||a|| + ||n||, tiny)"""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), tiny))


def gradcheck(fn: Callable[[], TensorNode], leaves: Sequence[TensorNode], eps: float = STEP,
              samples: Optional[int] = 8, rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare the reverse-pass gradient of the scalar `fn()` against central
    differences at up to `samples` coordinates per leaf (all when None).
    """
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        leaf.grad = None
    backward(fn())

    analytic, numeric = [], []
    for leaf in leaves:
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
        size = leaf.values.size
        if samples is None or samples >= size:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=samples, replace=False)
        flat = leaf.values.reshape(-1)
        for i in coords:
            original = flat[i]
            with no_grad():
                flat[i] = original + eps
                plus = float(fn().values)
                flat[i] = original - eps
                minus = float(fn().values)
            flat[i] = original
            numeric.append((plus - minus) / (2.0 * eps))
            analytic.append(grad.reshape(-1)[i])
    return relative_error(np.array(analytic), np.array(numeric))


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> TensorNode:
    return TensorNode(rng.standard_normal(shape) * scale, requires_grad=True)


def _dim(rng: np.random.Generator, low: int = 1, high: int = MAX_DIM) -> int:
    return int(rng.integers(low, high + 1))


def _width(rng: np.random.Generator, low: int = 1) -> int:
    """Channel count divisible by the head count"""
    return HEADS * _dim(rng, low, MAX_DIM // HEADS)


def _project(out: TensorNode, rng: np.random.Generator) -> Callable[[TensorNode], TensorNode]:
    """Fixed random projection turning a tensor output into a scalar"""
    weights = rng.standard_normal(out.shape)
    return lambda node: sum_(mul(node, weights))


def _scalar(build: Callable[[], TensorNode], rng: np.random.Generator) -> Callable[[], TensorNode]:
    with no_grad():
        reduce = _project(build(), rng)
    return lambda: reduce(build())


# ---------------------------------------------------------------------------
# Cases: each draws its shapes (at most MAX_DIM per axis) and returns
# (scalar fn, leaves)
# ---------------------------------------------------------------------------

def _case_matmul(rng):
    n, inner, m = _dim(rng), _dim(rng), _dim(rng)
    a, b = _leaf(rng, n, inner), _leaf(rng, inner, m)
    return _scalar(lambda: matmul(a, b), rng), [a, b]


def _case_layer_norm(rng):
    n, c = _dim(rng), _dim(rng, 2)
    x, gamma, beta = _leaf(rng, n, c), _leaf(rng, c), _leaf(rng, c)
    return _scalar(lambda: layer_norm(x, gamma, beta), rng), [x, gamma, beta]


def _case_softmax(rng):
    n, m = _dim(rng), _dim(rng)
    x = _leaf(rng, n, m)
    mask = rng.random((n, m)) > 0.3
    mask[:, 0] = True
    return _scalar(lambda: softmax(x, mask), rng), [x]


def _case_attention(rng, seed):
    c = _width(rng)
    params = ParamStore(seed, "float64")
    init_attention(params, "attn", c)
    q, k = _leaf(rng, _dim(rng), c), _leaf(rng, _dim(rng), c)
    fn = _scalar(lambda: attention(q, k, k, HEADS, params, "attn"), rng)
    return fn, [q, k, params["attn.q.weight"], params["attn.v.bias"]]


def _case_ffn(rng, seed):
    c, hidden = _dim(rng), _dim(rng)
    params = ParamStore(seed, "float64")
    init_ffn(params, "ffn", c, hidden)
    x = _leaf(rng, _dim(rng), c)
    return _scalar(lambda: ffn(x, params, "ffn"), rng), [x, params["ffn.fc1.weight"], params["ffn.fc2.bias"]]


def _case_focal(rng):
    n = _dim(rng)
    logits = _leaf(rng, n, scale=2.0)
    targets = (rng.random(n) > 0.5).astype(np.float64)
    mask = rng.random(n) > 0.25
    mask[0] = True
    return (lambda: focal_loss(logits, targets, 0.25, 2.0, mask)), [logits]


def _boxes(rng, n):
    center = rng.uniform(0.3, 0.7, size=(n, 2))
    half = rng.uniform(0.05, 0.2, size=(n, 2))
    return np.concatenate([center - half, center + half], axis=1)


def _case_giou(rng):
    target = _boxes(rng, _dim(rng))
    # offsets keep every min/max away from a tie and the boxes overlapping
    offset = rng.uniform(0.005, 0.03, size=target.shape) * rng.choice([-1.0, 1.0], size=target.shape)
    pred = TensorNode(target + offset, requires_grad=True)
    return (lambda: sum_(giou_loss(pred, target))), [pred]


def _case_topo_head(rng, seed):
    c = _dim(rng)
    params = ParamStore(seed, "float64")
    init_topo_head(params, "topo", c)
    a, b = _leaf(rng, _dim(rng), c), _leaf(rng, _dim(rng), c)
    fn = _scalar(lambda: topo_head(a, b, params, "topo"), rng)
    return fn, [a, b, params["topo.right.weight"], params["topo.out.weight"]]


def _layer_params(seed: int, channels: int, hidden: int, blocks: Optional[int]) -> ParamStore:
    params = ParamStore(seed, "float64")
    if blocks is None:
        init_standard_layer(params, "layer", channels, hidden)
    else:
        init_reordered_layer(params, "layer", channels, hidden, blocks)
    return params


def _case_standard_layer(rng, seed):
    c = _width(rng, 2)
    params = _layer_params(seed, c, _dim(rng), None)
    q, mem = _leaf(rng, _dim(rng), c), _leaf(rng, _dim(rng), c)
    fn = _scalar(lambda: standard_layer(q, mem, mem, params, "layer", HEADS), rng)
    return fn, [q, mem, params["layer.sa.attn.k.weight"], params["layer.ffn.fc1.weight"]]


def _case_reordered_layer(rng, seed):
    c = _width(rng, 2)
    params = _layer_params(seed, c, _dim(rng), 2)
    q, mem = _leaf(rng, _dim(rng), c), _leaf(rng, _dim(rng), c)

    def build():
        x, taps = reordered_layer(q, mem, mem, params, "layer", HEADS, 2)
        # one tap output joins the scalar
        return sum_(mul(x, tap_weights[0])) + sum_(mul(taps[1], tap_weights[1]))

    tap_weights = (rng.standard_normal(q.shape), rng.standard_normal(q.shape))
    return build, [q, mem, params["layer.fuse.weight"], params["layer.ca.1.attn.q.weight"],
                   params["layer.ca.0.norm.gamma"]]


CASES: Dict[str, Callable] = {
    "matmul": lambda rng, seed: _case_matmul(rng),
    "layer_norm": lambda rng, seed: _case_layer_norm(rng),
    "softmax": lambda rng, seed: _case_softmax(rng),
    "attention": _case_attention,
    "ffn": _case_ffn,
    "focal_loss": lambda rng, seed: _case_focal(rng),
    "giou_loss": lambda rng, seed: _case_giou(rng),
    "topo_head": _case_topo_head,
    "standard_layer": _case_standard_layer,
    "reordered_layer": _case_reordered_layer,
}


def check_case(name: str, trial: int = 0, seed: int = 0, samples: int = 8) -> GradcheckResult:
    rng = np.random.default_rng([seed, trial, list(CASES).index(name)])
    fn, leaves = CASES[name](rng, seed * 1000 + trial)
    return GradcheckResult(name=name, trial=trial, rel_error=gradcheck(fn, leaves, samples=samples, rng=rng))


def run_suite(trials: int = 100, seed: int = 0, cases: Optional[Sequence[str]] = None) -> List[GradcheckResult]:
    """Every case over `trials` seeded trials"""
    results = []
    for name in cases or CASES:
        for trial in range(trials):
            result = check_case(name, trial, seed)
            if not result.passed:
                logger.warning(f"Gradient check {name} trial {trial} failed: rel error {result.rel_error:.2e}")
            results.append(result)
    failed = sum(not r.passed for r in results)
    logger.info(f"Gradient suite: {len(results) - failed}/{len(results)} checks passed")
    return results
