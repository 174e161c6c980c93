"""Object-wise and point-wise ROC-AUC plus report writers."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .config import RunConfig, config_hash
from .errors import DataError
from .fusion import AnomalyResult
from .io_utils import atomic_write_json, atomic_write_text
from .pointcloud import DatasetSplit

ABLATION_COLUMNS = (
  "axis",
  "value",
  "o_roc",
  "p_roc",
  "interior_empty_fraction",
  "mean_invisible",
  "final_loss",
  "wall_s",
)


def _prepare(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
  s = np.asarray(scores, dtype=np.float64).ravel()
  y = np.asarray(labels).ravel()
  if s.shape != y.shape:
    raise DataError(f"{s.size} scores but {y.size} labels")
  if not np.all(np.isfinite(s)):
    raise DataError("scores must be finite")
  if np.any((y != 0) & (y != 1)):
    raise DataError("labels must be binary")
  return s, y.astype(bool)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
  """Mann-Whitney AUROC with midranks for ties; None when a class is absent."""
  s, y = _prepare(scores, labels)
  n_pos = int(y.sum())
  n_neg = y.size - n_pos
  if n_pos == 0 or n_neg == 0:
    return None
  ranks = rankdata(s, method="average")
  u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
  return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
  """(fpr, tpr) swept over descending distinct thresholds, starting at (0, 0)."""
  s, y = _prepare(scores, labels)
  order = np.argsort(-s, kind="mergesort")
  s, y = s[order], y[order]
  distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=np.int64)
  cut = np.concatenate([distinct, [s.size - 1]])
  tps = np.cumsum(y)[cut]
  fps = (cut + 1) - tps
  n_pos, n_neg = tps[-1], fps[-1]
  tpr = np.concatenate([[0.0], tps / n_pos]) if n_pos else np.zeros(cut.size + 1)
  fpr = np.concatenate([[0.0], fps / n_neg]) if n_neg else np.zeros(cut.size + 1)
  return fpr, tpr


def trapezoid_auroc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
  fpr, tpr = roc_curve(scores, labels)
  if fpr[-1] == 0.0 or tpr[-1] == 0.0:
    return None
  return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class EvalReport:
  o_roc: Optional[float]
  p_roc: Optional[float]
  samples: List[Dict[str, Any]] = field(default_factory=list)
  categories: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
  n_objects: int = 0
  n_points: int = 0
  config_hash: str = ""
  config: Dict[str, Any] = field(default_factory=dict)

  def to_json(self) -> Dict[str, Any]:
    return asdict(self)


def _metrics(results: Sequence[AnomalyResult], clouds: Sequence[Tuple[Any, int]]) -> Tuple[Optional[float], Optional[float]]:
  obj_scores = [r.object_score for r in results]
  obj_labels = [label for _, label in clouds]
  point_scores = np.concatenate([r.point_scores for r in results])
  point_labels = np.concatenate([c.label_array() for c, _ in clouds])
  return auroc(obj_scores, obj_labels), auroc(point_scores, point_labels)


def evaluate(
  results: Union[Sequence[AnomalyResult], Mapping[str, AnomalyResult]],
  dataset: DatasetSplit,
  config: Optional[RunConfig] = None,
) -> EvalReport:
  """O-ROC over object scores; P-ROC over every point of every test cloud."""
  clouds = list(dataset.test)
  if isinstance(results, Mapping):
    missing = [c.name for c, _ in clouds if c.name not in results]
    if missing:
      raise DataError(f"no scores for test cloud {missing[0]}")
    ordered = [results[c.name] for c, _ in clouds]
  else:
    ordered = list(results)
  if len(ordered) != len(clouds):
    raise DataError(f"{len(ordered)} results for {len(clouds)} test clouds")
  if not clouds:
    raise DataError("test split is empty")
  for (cloud, _), res in zip(clouds, ordered):
    if res.point_scores.shape[0] != cloud.n:
      raise DataError(f"{cloud.name}: {res.point_scores.shape[0]} point scores for {cloud.n} points")

  o_roc, p_roc = _metrics(ordered, clouds)
  categories: Dict[str, Dict[str, Optional[float]]] = {}
  for cat in sorted({c.category for c, _ in clouds}):
    idx = [i for i, (c, _) in enumerate(clouds) if c.category == cat]
    co, cp = _metrics([ordered[i] for i in idx], [clouds[i] for i in idx])
    categories[cat or "uncategorized"] = {"o_roc": co, "p_roc": cp}
  samples = [
    {
      "name": c.name,
      "category": c.category,
      "label": int(label),
      "object_score": float(r.object_score),
      "labeled_points": c.anomalous_points,
      "invisible_count": r.invisible_count,
    }
    for (c, label), r in zip(clouds, ordered)
  ]
  return EvalReport(
    o_roc=o_roc,
    p_roc=p_roc,
    samples=samples,
    categories=categories,
    n_objects=len(clouds),
    n_points=int(sum(c.n for c, _ in clouds)),
    config_hash=config_hash(config) if config is not None else "",
    config=config.to_json() if config is not None else {},
  )


def write_report(report: EvalReport, path: Union[str, Path]) -> Path:
  return atomic_write_json(path, report.to_json())


def _cell(value: Any) -> str:
  if value is None:
    return ""
  if isinstance(value, float):
    return f"{value:.6f}"
  return str(value)


def write_ablation_csv(rows: Sequence[Mapping[str, Any]], path: Union[str, Path]) -> Path:
  buf = io.StringIO()
  writer = csv.writer(buf, lineterminator="\n")
  writer.writerow(ABLATION_COLUMNS)
  for row in rows:
    writer.writerow([_cell(row.get(col)) for col in ABLATION_COLUMNS])
  return atomic_write_text(path, buf.getvalue())
