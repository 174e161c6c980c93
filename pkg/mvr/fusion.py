"""Patch features -> pixels -> points, view fusion and point scores.

Patch ``(i, j)`` of a ``gh x gw`` grid is anchored at the geometric centre
of its pixel block. A pixel centre ``u`` of a ``w``-wide image lands at grid
coordinate ``(u + 0.5) * gw / w - 0.5``, clamped to the grid, and reads the
bilinear blend of the four surrounding patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .autograd import GradTape, register_backward
from .backbone import FeatureMap
from .config import FUSION_MODES
from .errors import ConfigError, DataError, LogicError
from .layers import Grads
from .loss import row_cosine_distances


def _axis_taps(coord: np.ndarray, pixels: int, cells: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
  g = (np.asarray(coord, dtype=np.float64) + 0.5) * (cells / pixels) - 0.5
  g = np.clip(g, 0.0, cells - 1)
  i0 = np.minimum(np.floor(g).astype(np.int64), max(cells - 2, 0))
  i1 = np.minimum(i0 + 1, cells - 1)
  return i0, i1, g - i0


def interpolation_matrix(pixels: int, cells: int) -> np.ndarray:
  """(pixels, cells) row-stochastic matrix of 1-D linear weights."""
  i0, i1, f = _axis_taps(np.arange(pixels), pixels, cells)
  m = np.zeros((pixels, cells), dtype=np.float64)
  rows = np.arange(pixels)
  np.add.at(m, (rows, i0), 1.0 - f)
  np.add.at(m, (rows, i1), f)
  return m


def bilinear_taps(
  u: np.ndarray,
  v: np.ndarray,
  grid: Tuple[int, int],
  target: Tuple[int, int],
) -> Tuple[np.ndarray, np.ndarray]:
  """Flat token indices (M, 4) and weights (M, 4) for pixel coordinates."""
  gh, gw = grid
  h, w = target
  x0, x1, fx = _axis_taps(u, w, gw)
  y0, y1, fy = _axis_taps(v, h, gh)
  idx = np.stack([y0 * gw + x0, y0 * gw + x1, y1 * gw + x0, y1 * gw + x1], axis=1)
  wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1)
  return idx, wts


def sample_patch_features(
  fmap: FeatureMap,
  u: Sequence[float],
  v: Sequence[float],
  target: Tuple[int, int],
) -> np.ndarray:
  """Bilinear features at (possibly fractional) pixel coordinates, (M, C)."""
  idx, wts = bilinear_taps(np.atleast_1d(u), np.atleast_1d(v), (fmap.grid_h, fmap.grid_w), target)
  return np.einsum("mk,mkc->mc", wts, fmap.tokens.astype(np.float64)[idx])


def upsample_patch_features(fmap: FeatureMap, target: Tuple[int, int]) -> np.ndarray:
  """Pixel feature grid (h, w, C) by separable bilinear interpolation."""
  h, w = int(target[0]), int(target[1])
  if h < 1 or w < 1:
    raise ConfigError(f"invalid upsample target {target}")
  wy = interpolation_matrix(h, fmap.grid_h)
  wx = interpolation_matrix(w, fmap.grid_w)
  tmp = np.einsum("xj,ijc->ixc", wx, fmap.data.astype(np.float64))
  return np.einsum("yi,ixc->yxc", wy, tmp)


def backproject_view(
  entries: np.ndarray,
  teacher_grid: np.ndarray,
  student_grid: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
  """Per-point features at owning pixels.

  ``entries`` holds (point, u, v) rows at the pixel grid's resolution.
  """
  e = np.asarray(entries, dtype=np.int64).reshape(-1, 3)
  h, w = teacher_grid.shape[:2]
  if student_grid is not None and student_grid.shape != teacher_grid.shape:
    raise DataError("teacher and student pixel grids differ in shape")
  pts, u, v = e[:, 0], e[:, 1], e[:, 2]
  bad = (u < 0) | (u >= w) | (v < 0) | (v >= h)
  if bad.any():
    i = int(np.flatnonzero(bad)[0])
    raise LogicError(
      f"stale correspondence: pixel ({u[i]}, {v[i]}) is outside the {w}x{h} feature grid"
    )
  t = teacher_grid[v, u]
  s = student_grid[v, u] if student_grid is not None else None
  return pts, t, s


@dataclass(frozen=True)
class FusedPointFeatures:
  teacher: np.ndarray  # (N, C)
  student: np.ndarray  # (N, C)
  visibility_count: np.ndarray  # (N,)

  def __post_init__(self) -> None:
    if self.teacher.shape != self.student.shape or self.teacher.ndim != 2:
      raise DataError("fused teacher/student features must be matching (N, C) matrices")
    if self.visibility_count.shape != (self.teacher.shape[0],):
      raise DataError("visibility_count must have one entry per point")
    vis = self.visible
    if not (np.all(np.isfinite(self.teacher[vis])) and np.all(np.isfinite(self.student[vis]))):
      raise DataError("fused features of visible points must be finite")

  @property
  def visible(self) -> np.ndarray:
    return self.visibility_count > 0

  @property
  def invisible_count(self) -> int:
    return int((self.visibility_count == 0).sum())

  @property
  def n(self) -> int:
    return int(self.teacher.shape[0])


def _divisor(counts: np.ndarray, n_views: int, mode: str) -> np.ndarray:
  if mode not in FUSION_MODES:
    raise ConfigError(f"fusion mode must be one of {', '.join(FUSION_MODES)}")
  if mode == "all":
    return np.full(counts.shape, float(n_views))
  return np.maximum(counts, 1).astype(np.float64)


def fuse_views(
  per_view: Sequence[Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]],
  n_points: int,
  n_views: Optional[int] = None,
  mode: str = "visible",
) -> FusedPointFeatures:
  """Mean of per-view point features over the views that see each point.

  ``mode="all"`` divides by the total view count instead. Points seen by no
  view keep zero features and a zero visibility count.
  """
  if not per_view:
    raise DataError("fusion needs at least one view")
  channels = per_view[0][1].shape[1]
  t_sum = np.zeros((n_points, channels), dtype=np.float64)
  s_sum = np.zeros((n_points, channels), dtype=np.float64)
  counts = np.zeros(n_points, dtype=np.int64)
  for pts, t, s in per_view:
    np.add.at(t_sum, pts, t)
    np.add.at(s_sum, pts, t if s is None else s)
    np.add.at(counts, pts, 1)
  div = _divisor(counts, n_views if n_views is not None else len(per_view), mode)[:, None]
  return FusedPointFeatures(t_sum / div, s_sum / div, counts)


@dataclass
class ProjectionPlan:
  """Linear map from stacked per-view patch tokens (V*T, C) to fused point
  features (N, C): bilinear sampling, owner lookup and view averaging in one
  sparse matrix."""

  matrix: sparse.csr_matrix
  visibility_count: np.ndarray
  view_counts: List[int]
  n_views: int
  tokens: int

  @staticmethod
  def build(
    entries: Sequence[np.ndarray],
    grid: Tuple[int, int],
    target: Tuple[int, int],
    n_points: int,
    mode: str = "visible",
  ) -> "ProjectionPlan":
    gh, gw = grid
    n_tokens = gh * gw
    h, w = target
    counts = np.zeros(n_points, dtype=np.int64)
    for e in entries:
      np.add.at(counts, np.asarray(e)[:, 0], 1)
    div = _divisor(counts, len(entries), mode)
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    for k, e in enumerate(entries):
      e = np.asarray(e, dtype=np.int64)
      if e.size == 0:
        continue
      u, v = e[:, 1], e[:, 2]
      if (u.min() < 0) or (v.min() < 0) or (u.max() >= w) or (v.max() >= h):
        raise LogicError(f"stale correspondence in view {k}: pixel outside the {w}x{h} grid")
      idx, wts = bilinear_taps(u, v, grid, target)
      rows.append(np.repeat(e[:, 0], 4))
      cols.append((k * n_tokens + idx).ravel())
      vals.append((wts / div[e[:, 0], None]).ravel())
    shape = (n_points, len(entries) * n_tokens)
    if rows:
      matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
      ).tocsr()
    else:
      matrix = sparse.csr_matrix(shape, dtype=np.float64)
    return ProjectionPlan(matrix, counts, [len(e) for e in entries], len(entries), n_tokens)

  def apply(self, maps: np.ndarray) -> np.ndarray:
    """(V, T, C) -> (N, C)"""
    v, t, c = maps.shape
    if v != self.n_views or t != self.tokens:
      raise LogicError(f"projection plan expects ({self.n_views}, {self.tokens}, C), got {maps.shape}")
    return np.asarray(self.matrix @ maps.reshape(v * t, c)).astype(maps.dtype, copy=False)

  def backward(self, dfused: np.ndarray) -> np.ndarray:
    c = dfused.shape[-1]
    out = np.asarray(self.matrix.T @ dfused)
    return out.reshape(self.n_views, self.tokens, c).astype(dfused.dtype, copy=False)


def project_tokens(maps: np.ndarray, plan: ProjectionPlan, tape: Optional[GradTape] = None) -> np.ndarray:
  out = plan.apply(maps)
  if tape is not None:
    tape.record("project", plan)
  return out


@register_backward("project")
def _project_backward(g: np.ndarray, plan: ProjectionPlan) -> Tuple[np.ndarray, Grads]:
  return plan.backward(g), {}


@dataclass
class AnomalyResult:
  point_scores: np.ndarray
  object_score: float
  diagnostics: Dict[str, Any] = field(default_factory=dict)

  @property
  def invisible_count(self) -> int:
    return int(self.diagnostics.get("invisible_count", 0))

  def to_json(self, name: str = "") -> Dict[str, Any]:
    return {
      "name": name,
      "object_score": float(self.object_score),
      "point_scores": [float(x) for x in self.point_scores],
      "invisible_count": self.invisible_count,
      "view_visible_counts": list(self.diagnostics.get("view_visible_counts", [])),
    }

  @staticmethod
  def from_json(data: Dict[str, Any]) -> "AnomalyResult":
    scores = np.asarray(data["point_scores"], dtype=np.float64)
    diag = {
      "invisible_count": int(data.get("invisible_count", 0)),
      "view_visible_counts": list(data.get("view_visible_counts", [])),
    }
    return AnomalyResult(scores, float(data["object_score"]), diag)


def anomaly_scores(fused: FusedPointFeatures, view_counts: Optional[Sequence[int]] = None) -> AnomalyResult:
  """Cosine distance per visible point; unseen points score 0; object score is the max."""
  scores = row_cosine_distances(fused.teacher, fused.student)
  scores[~fused.visible] = 0.0
  diagnostics: Dict[str, Any] = {"invisible_count": fused.invisible_count}
  if view_counts is not None:
    diagnostics["view_visible_counts"] = [int(c) for c in view_counts]
  return AnomalyResult(scores, float(scores.max()), diagnostics)
