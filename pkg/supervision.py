"""
Topology Supervision for LaneTopoLab
Projects ground-truth topology matrices onto prediction index space for a
given assignment, producing the target matrix and the mask of entries that
receive loss.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from assignment import AssignmentResult
from errors import ConfigurationError, UsageError

REGIMES = ("full", "valid_only")

IndexLike = Union[AssignmentResult, np.ndarray, Sequence[int], Sequence[Sequence[int]]]


@dataclass
class SupervisionTarget:
    """Binary target matrix z and boolean validity mask of the same shape"""
    z: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.z.shape

    def count_valid(self) -> int:
        return count_valid(self)


def count_valid(t: SupervisionTarget) -> int:
    """Number of entries that receive topology loss"""
    return int(np.count_nonzero(t.valid))


def _index_rows(sigma: IndexLike) -> np.ndarray:
    """Normalize an assignment to an [N_gt x K] index array"""
    if isinstance(sigma, AssignmentResult):
        sigma = sigma.sigma
    if isinstance(sigma, np.ndarray):
        arr = sigma.astype(np.int64)
    else:
        rows = [sorted(int(j) for j in s) if isinstance(s, (list, tuple, set, frozenset, np.ndarray)) else [int(s)]
                for s in sigma]
        if not rows:
            return np.zeros((0, 1), dtype=np.int64)
        sizes = {len(r) for r in rows}
        if len(sizes) > 1:
            raise UsageError(f"positive sets have unequal sizes {sorted(sizes)}")
        arr = np.array(rows, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def _check_indices(index: np.ndarray, limit: int, what: str):
    flat = index.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= limit):
        raise UsageError(f"{what} index out of range [0, {limit}): {flat.tolist()}")
    if len(np.unique(flat)) != flat.size:
        raise UsageError(f"{what} positive sets overlap: {flat.tolist()}")


def _project(g: np.ndarray, rows: np.ndarray, cols: np.ndarray, n_rows: int, n_cols: int) -> SupervisionTarget:
    g = np.asarray(g)
    if g.shape != (rows.shape[0], cols.shape[0]):
        raise UsageError(f"topology matrix shape {list(g.shape)} does not match "
                         f"{rows.shape[0]} row and {cols.shape[0]} column ground truths")
    _check_indices(rows, n_rows, "row")
    _check_indices(cols, n_cols, "column")
    z = np.zeros((n_rows, n_cols), dtype=np.int8)
    valid = np.zeros((n_rows, n_cols), dtype=bool)
    flat_rows, flat_cols = rows.reshape(-1), cols.reshape(-1)
    gt_rows = np.repeat(np.arange(rows.shape[0]), rows.shape[1])
    gt_cols = np.repeat(np.arange(cols.shape[0]), cols.shape[1])
    if flat_rows.size and flat_cols.size:
        z[np.ix_(flat_rows, flat_cols)] = g[np.ix_(gt_rows, gt_cols)]
        valid[np.ix_(flat_rows, flat_cols)] = True
    return SupervisionTarget(z=z, valid=valid)


def project_o2o(g: np.ndarray, sigma: IndexLike, n_rows: int, n_cols: int,
                regime: str = "valid_only", col_sigma: Optional[IndexLike] = None) -> SupervisionTarget:
    """
    z[sigma(p)][col_sigma(q)] = g[p][q], zero elsewhere.

    Under "valid_only" the mask is the matched-rows x matched-columns product
    set; under "full" every entry is supervised. Columns follow `sigma` unless
    `col_sigma` is given (lane-traffic targets use the traffic matching).
    """
    if regime not in REGIMES:
        raise ConfigurationError(f"unknown supervision regime {regime!r}; expected one of {REGIMES}")
    rows = _index_rows(sigma)
    cols = rows if col_sigma is None else _index_rows(col_sigma)
    if rows.shape[1] != 1 or cols.shape[1] != 1:
        raise UsageError("project_o2o needs one prediction per ground truth")
    target = _project(g, rows, cols, n_rows, n_cols)
    if regime == "full":
        target.valid[:] = True
    return target


def project_o2m(g: np.ndarray, sets: IndexLike, n_rows: int, n_cols: int,
                col_sigma: Optional[IndexLike] = None) -> SupervisionTarget:
    """
    z[r][s] = g[p][q] for r in set(p), s in set(q); the mask covers exactly
    those cross products. Lane-traffic targets pass the traffic one-to-one
    matching as `col_sigma`.
    """
    rows = _index_rows(sets)
    cols = rows if col_sigma is None else _index_rows(col_sigma)
    return _project(g, rows, cols, n_rows, n_cols)


def build_targets(scene, lane_assignment: AssignmentResult, traffic_assignment: AssignmentResult,
                  n_lane_preds: int, n_traffic_preds: int,
                  regime: str = "valid_only") -> Tuple[SupervisionTarget, SupervisionTarget]:
    """(LL, LT) targets for one prediction set"""
    if lane_assignment.mode == "o2m":
        ll = project_o2m(scene.g_ll, lane_assignment, n_lane_preds, n_lane_preds)
        lt = project_o2m(scene.g_lt, lane_assignment, n_lane_preds, n_traffic_preds, col_sigma=traffic_assignment)
    else:
        ll = project_o2o(scene.g_ll, lane_assignment, n_lane_preds, n_lane_preds, regime)
        lt = project_o2o(scene.g_lt, lane_assignment, n_lane_preds, n_traffic_preds, regime,
                         col_sigma=traffic_assignment)
    return ll, lt
