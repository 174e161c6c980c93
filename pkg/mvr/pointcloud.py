from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from plyfile import PlyData, PlyElement, PlyHeaderParseError, PlyParseError as _PlyBodyError

from .config import ANOMALY_KINDS, SHAPE_KINDS
from .errors import ConfigError, DataError, InputError, PlyParseError
from .io_utils import atomic_write_bytes

BOX_HALF_EXTENTS = (0.75, 0.6, 0.5)
CYLINDER_RADIUS = 0.6
CYLINDER_HALF_HEIGHT = 0.7


def _frozen(a: np.ndarray) -> np.ndarray:
  a.setflags(write=False)
  return a


@dataclass(frozen=True)
class PointCloud:
  points: np.ndarray
  labels: Optional[np.ndarray] = None
  name: str = ""
  category: str = ""
  seed: Optional[int] = None  # generator seed of synthetic clouds

  def __post_init__(self) -> None:
    pts = np.array(self.points, dtype=np.float64, copy=True)
    if pts.ndim != 2 or pts.shape[1] != 3:
      raise DataError(f"points must be an N x 3 array, got shape {pts.shape}")
    if pts.shape[0] < 1:
      raise DataError("N must be >= 1")
    bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
    if bad.size:
      raise DataError(f"non-finite coordinate at vertex {int(bad[0])}")
    object.__setattr__(self, "points", _frozen(pts))
    if self.labels is not None:
      lab = np.array(self.labels, dtype=np.uint8, copy=True).reshape(-1)
      if lab.shape[0] != pts.shape[0]:
        raise DataError(f"labels length {lab.shape[0]} does not match N={pts.shape[0]}")
      if np.any(lab > 1):
        raise DataError("labels must be binary")
      object.__setattr__(self, "labels", _frozen(lab))

  @property
  def n(self) -> int:
    return int(self.points.shape[0])

  @property
  def anomalous_points(self) -> int:
    return 0 if self.labels is None else int(self.labels.sum())

  def label_array(self) -> np.ndarray:
    return np.zeros(self.n, dtype=np.uint8) if self.labels is None else self.labels

  def with_points(self, points: np.ndarray) -> "PointCloud":
    return PointCloud(points, self.labels, self.name, self.category, self.seed)


@dataclass
class DatasetSplit:
  train: List[PointCloud] = field(default_factory=list)
  test: List[Tuple[PointCloud, int]] = field(default_factory=list)

  def __post_init__(self) -> None:
    for cloud in self.train:
      if cloud.anomalous_points:
        raise DataError(f"training cloud {cloud.name or '?'} has anomalous points; train on normal samples only")
    for cloud, label in self.test:
      if label not in (0, 1):
        raise DataError(f"object label of {cloud.name or '?'} must be 0 or 1")


def load_ply(path: Union[str, Path]) -> PointCloud:
  p = Path(path)
  if not p.exists() or not p.is_file():
    raise InputError(f"File not found: {p}")
  try:
    ply = PlyData.read(str(p))
  except PlyHeaderParseError as exc:
    raise PlyParseError(f"{p.name}: malformed PLY header: {exc.message}", line=exc.line) from exc
  except _PlyBodyError as exc:
    raise DataError(f"{p.name}: malformed PLY body: {exc}") from exc
  try:
    vertex = ply["vertex"]
  except KeyError as exc:
    raise PlyParseError(f"{p.name}: no vertex element") from exc
  names = vertex.data.dtype.names or ()
  for axis in ("x", "y", "z"):
    if axis not in names:
      raise PlyParseError(f"{p.name}: vertex element lacks property {axis}")
  if len(vertex.data) == 0:
    raise DataError(f"{p.name}: N must be >= 1")
  pts = np.stack([np.asarray(vertex[a], dtype=np.float64) for a in ("x", "y", "z")], axis=1)
  labels = np.asarray(vertex["label"], dtype=np.uint8) if "label" in names else None
  return PointCloud(pts, labels, name=p.stem)


def coordinate_dtype(points: np.ndarray) -> str:
  """float32 when every coordinate survives the cast, else float64."""
  exact = np.array_equal(points.astype(np.float32).astype(np.float64), points)
  return "<f4" if exact else "<f8"


def _ply_bytes(cloud: PointCloud, colors: Optional[np.ndarray], text: bool) -> bytes:
  coord = coordinate_dtype(cloud.points)
  dtype = [("x", coord), ("y", coord), ("z", coord)]
  if colors is not None:
    dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
  if cloud.labels is not None:
    dtype += [("label", "u1")]
  rows = np.empty(cloud.n, dtype=dtype)
  pts = cloud.points
  rows["x"], rows["y"], rows["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
  if colors is not None:
    rows["red"], rows["green"], rows["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
  if cloud.labels is not None:
    rows["label"] = cloud.labels
  buf = io.BytesIO()
  PlyData([PlyElement.describe(rows, "vertex")], text=text, byte_order="<").write(buf)
  return buf.getvalue()


def save_ply(cloud: PointCloud, path: Union[str, Path], text: bool = False) -> Path:
  return atomic_write_bytes(path, _ply_bytes(cloud, None, text))


def round_half_up(x: np.ndarray) -> np.ndarray:
  return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def scores_to_colors(scores: Sequence[float]) -> np.ndarray:
  """Linear blue (min) -> red (max) map; a constant range maps to blue."""
  s = np.asarray(scores, dtype=np.float64).reshape(-1)
  lo, hi = (float(s.min()), float(s.max())) if s.size else (0.0, 0.0)
  t = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
  colors = np.zeros((s.size, 3), dtype=np.uint8)
  colors[:, 0] = round_half_up(255.0 * t)
  colors[:, 2] = round_half_up(255.0 * (1.0 - t))
  return colors


def save_ply_colored(cloud: PointCloud, scores: Sequence[float], path: Union[str, Path]) -> Path:
  s = np.asarray(scores, dtype=np.float64).reshape(-1)
  if s.shape[0] != cloud.n:
    raise DataError(f"scores length {s.shape[0]} does not match N={cloud.n}")
  return atomic_write_bytes(path, _ply_bytes(cloud, scores_to_colors(s), text=False))


def normalize(cloud: PointCloud) -> Tuple[PointCloud, np.ndarray, float]:
  center = cloud.points.mean(axis=0)
  shifted = cloud.points - center
  scale = float(np.linalg.norm(shifted, axis=1).max())
  if not scale > 0.0:
    scale = 1.0
  return cloud.with_points(shifted / scale), center, scale


@dataclass(frozen=True)
class AnomalySpec:
  kind: str = "dent"
  radius: float = 0.2
  depth: float = 0.1


def shape_extent(kind: str) -> float:
  if kind == "sphere":
    return 1.0
  if kind == "box":
    return float(min(BOX_HALF_EXTENTS))
  if kind == "cylinder":
    return float(min(CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT))
  raise ConfigError(f"Unknown shape kind: {kind}; choose from {', '.join(SHAPE_KINDS)}")


def _sample_sphere(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
  v = rng.standard_normal((n, 3))
  v /= np.linalg.norm(v, axis=1, keepdims=True)
  return v, v.copy()


def _sample_box(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
  h = np.asarray(BOX_HALF_EXTENTS)
  face_area = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
  probs = np.repeat(face_area, 2) / (2.0 * face_area.sum())
  faces = rng.choice(6, size=n, p=probs)
  pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
  axis = faces // 2
  sign = np.where(faces % 2 == 0, 1.0, -1.0)
  rows = np.arange(n)
  pts[rows, axis] = sign * h[axis]
  normals = np.zeros((n, 3))
  normals[rows, axis] = sign
  return pts, normals


def _sample_cylinder(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
  r, hh = CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT
  side, cap = 2.0 * np.pi * r * 2.0 * hh, np.pi * r * r
  part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2.0 * cap))
  theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
  rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=n))
  z = rng.uniform(-hh, hh, size=n)
  cos, sin = np.cos(theta), np.sin(theta)
  pts = np.stack([r * cos, r * sin, z], axis=1)
  normals = np.stack([cos, sin, np.zeros(n)], axis=1)
  for idx, sign in ((1, 1.0), (2, -1.0)):
    m = part == idx
    pts[m] = np.stack([rad[m] * cos[m], rad[m] * sin[m], np.full(m.sum(), sign * hh)], axis=1)
    normals[m] = (0.0, 0.0, sign)
  return pts, normals


_SAMPLERS = {"sphere": _sample_sphere, "box": _sample_box, "cylinder": _sample_cylinder}


def make_synthetic(
  kind: str,
  n_points: int,
  anomaly: Optional[AnomalySpec] = None,
  rng_seed: int = 0,
  name: str = "",
) -> PointCloud:
  if kind not in _SAMPLERS:
    raise ConfigError(f"Unknown shape kind: {kind}; choose from {', '.join(SHAPE_KINDS)}")
  if n_points < 100:
    raise ConfigError("n_points must be >= 100")
  extent = shape_extent(kind)
  if anomaly is not None:
    if anomaly.kind not in ANOMALY_KINDS:
      raise ConfigError(f"Unknown anomaly kind: {anomaly.kind}; choose from {', '.join(ANOMALY_KINDS)}")
    if not 0.0 < anomaly.radius < extent:
      raise ConfigError(f"anomaly radius must lie in (0, {extent}) for {kind}")
    if not 0.0 <= anomaly.depth < extent:
      raise ConfigError(f"anomaly depth must lie in [0, {extent}) for {kind}")
  rng = np.random.default_rng(rng_seed)
  pts, normals = _SAMPLERS[kind](rng, n_points)
  # drawn unconditionally so the base surface never depends on the anomaly
  center = pts[int(rng.integers(n_points))].copy()
  labels = np.zeros(n_points, dtype=np.uint8)
  if anomaly is not None:
    region = np.linalg.norm(pts - center, axis=1) < anomaly.radius
    sign = -1.0 if anomaly.kind == "dent" else 1.0
    pts[region] += sign * anomaly.depth * normals[region]
    if anomaly.depth != 0.0:
      labels[region] = 1
  return PointCloud(pts, labels, name=name or kind, category=kind, seed=int(rng_seed))
