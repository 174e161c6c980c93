"""Global cosine reconstruction loss with hard-mining gradient shrinking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError


@dataclass
class LossConfig:
  k_pct: float = 0.9
  shrink_factor: float = 0.1

  def validate(self) -> "LossConfig":
    if not 0.0 <= self.k_pct <= 1.0:
      raise ConfigError(f"k_pct must lie in [0, 1], got {self.k_pct}")
    if not 0.0 < self.shrink_factor <= 1.0:
      raise ConfigError(f"shrink_factor must lie in (0, 1], got {self.shrink_factor}")
    return self


@dataclass
class LossResult:
  loss: float
  grads: List[np.ndarray]  # d loss / d student, one per sample
  mask: List[np.ndarray]  # per-row "well restored" flags, one per sample
  per_sample: List[float]


def cosine_distance(a: Sequence[float], b: Sequence[float]) -> float:
  """1 - cos(a, b) in [0, 2]; a zero vector gives 1."""
  x = np.asarray(a, dtype=np.float64).ravel()
  y = np.asarray(b, dtype=np.float64).ravel()
  nx, ny = np.linalg.norm(x), np.linalg.norm(y)
  if nx == 0.0 or ny == 0.0:
    return 1.0
  return float(np.clip(1.0 - np.dot(x, y) / (nx * ny), 0.0, 2.0))


def row_cosine_distances(teacher: np.ndarray, student: np.ndarray) -> np.ndarray:
  """Row-wise cosine distance of two (N, C) matrices; zero rows give 1."""
  t = np.asarray(teacher, dtype=np.float64)
  s = np.asarray(student, dtype=np.float64)
  nt = np.linalg.norm(t, axis=-1)
  ns = np.linalg.norm(s, axis=-1)
  denom = nt * ns
  dot = (t * s).sum(axis=-1)
  out = np.ones(t.shape[:-1], dtype=np.float64)
  ok = denom > 0
  out[ok] = 1.0 - dot[ok] / denom[ok]
  return np.clip(out, 0.0, 2.0)


def hard_mining_select(distances: Sequence[float], k_pct: float) -> np.ndarray:
  """True where a distance is strictly below the k_pct quantile of the batch."""
  d = np.asarray(distances, dtype=np.float64)
  if d.size == 0:
    raise DataError("hard mining needs a non-empty batch")
  threshold = np.quantile(d, k_pct)
  return d < threshold


def global_cosine_loss(
  teacher: Sequence[np.ndarray],
  student: Sequence[np.ndarray],
  config: LossConfig,
  mask: Optional[Sequence[np.ndarray]] = None,
) -> LossResult:
  """Mean over samples of the cosine distance between flattened tensors.

  Each sample is an (N, C) array of feature points (fused point features or
  patch tokens). Points selected by hard mining over the whole batch have
  their gradient rows scaled by ``shrink_factor``; the loss value is not
  affected. ``mask`` freezes the selection.
  """
  if len(teacher) != len(student) or not teacher:
    raise DataError("teacher and student batches must be non-empty and of equal length")
  for t, s in zip(teacher, student):
    if t.shape != s.shape:
      raise DataError(f"teacher/student shape mismatch: {t.shape} vs {s.shape}")
  if mask is None:
    rows = [row_cosine_distances(t.reshape(-1, t.shape[-1]), s.reshape(-1, s.shape[-1]))
            for t, s in zip(teacher, student)]
    flat = hard_mining_select(np.concatenate(rows), config.k_pct)
    bounds = np.cumsum([0] + [r.size for r in rows])
    mask = [flat[bounds[i]:bounds[i + 1]].reshape(t.shape[:-1]) for i, t in enumerate(teacher)]
  n = len(teacher)
  losses: List[float] = []
  grads: List[np.ndarray] = []
  for t, s, m in zip(teacher, student, mask):
    tf = t.astype(np.float64).ravel()
    sf = s.astype(np.float64).ravel()
    nt, ns = np.linalg.norm(tf), np.linalg.norm(sf)
    if nt == 0.0 or ns == 0.0:
      raise NumericError("zero-norm feature tensor in cosine loss")
    cos = float(np.dot(tf, sf) / (nt * ns))
    losses.append(1.0 - cos)
    g = -(tf / (nt * ns) - cos * sf / (ns * ns)) / n
    g = g.reshape(s.shape)
    if config.shrink_factor != 1.0:
      g[m] = g[m] * config.shrink_factor
    grads.append(g.astype(s.dtype, copy=False))
  loss = float(np.mean(losses))
  if not np.isfinite(loss):
    raise NumericError("non-finite loss")
  return LossResult(loss, grads, list(mask), losses)
