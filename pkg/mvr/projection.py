from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, LogicError
from .pointcloud import PointCloud

REFERENCE_RESOLUTION = 672
CAMERA_PLANE_EPS = 1e-12
RESOLUTION_SWEEP = (224, 448, 672, 896, 1120, 1344, 1568)


@dataclass(frozen=True)
class CameraIntrinsics:
  fx: float
  fy: float
  cx: float
  cy: float
  width: int
  height: int

  def __post_init__(self) -> None:
    if not (self.fx > 0 and self.fy > 0):
      raise ConfigError("focal lengths must be positive")
    if self.width < 1 or self.height < 1:
      raise ConfigError("image size must be positive")
    if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
      raise ConfigError("principal point must lie inside the image")

  @property
  def K(self) -> np.ndarray:
    return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

  def to_json(self) -> dict:
    return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}


def default_intrinsics(resolution: int, focal_length: float = 500.0) -> CameraIntrinsics:
  """Square camera whose focal length scales with resolution.

  The principal point sits at the centre of the pixel-centre grid, so a
  k-times-larger render tiles each coarse pixel with an exact k x k block.
  """
  f = focal_length * resolution / REFERENCE_RESOLUTION
  c = (resolution - 1) / 2.0
  return CameraIntrinsics(f, f, c, c, resolution, resolution)


@dataclass(frozen=True)
class Pose:
  rotation: np.ndarray
  translation: np.ndarray

  def __post_init__(self) -> None:
    R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
    t = np.array(self.translation, dtype=np.float64).reshape(3)
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0.0):
      raise ConfigError("rotation must be orthonormal")
    if abs(np.linalg.det(R) - 1.0) > 1e-9:
      raise ConfigError("rotation must have determinant +1")
    R.setflags(write=False)
    t.setflags(write=False)
    object.__setattr__(self, "rotation", R)
    object.__setattr__(self, "translation", t)

  @property
  def center(self) -> np.ndarray:
    return -self.rotation.T @ self.translation

  def to_json(self) -> dict:
    return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}

  @staticmethod
  def from_json(data: dict) -> "Pose":
    return Pose(np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3), np.asarray(data["translation"]))


def look_at(eye: np.ndarray) -> Pose:
  """Camera at `eye` looking at the origin (x right, y down, z forward)."""
  eye = np.asarray(eye, dtype=np.float64)
  z_axis = -eye / np.linalg.norm(eye)
  up = np.eye(3)[int(np.argmin(np.abs(z_axis)))]
  x_axis = np.cross(z_axis, up)
  x_axis /= np.linalg.norm(x_axis)
  y_axis = np.cross(z_axis, x_axis)
  R = np.stack([x_axis, y_axis, z_axis])
  return Pose(R, -R @ eye)


def fibonacci_directions(n: int) -> np.ndarray:
  if n == 1:
    return np.array([[0.0, 0.0, 1.0]])
  i = np.arange(n, dtype=np.float64)
  z = 1.0 - 2.0 * i / (n - 1)
  r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
  phi = i * np.pi * (3.0 - np.sqrt(5.0))
  return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def generate_view_poses(n_views: int, radius: float = 3.0) -> List[Pose]:
  if n_views < 1:
    raise ConfigError("n_views must be >= 1")
  if radius <= 0:
    raise ConfigError("camera radius must be positive")
  return [look_at(radius * d) for d in fibonacci_directions(n_views)]


def project_points(points: np.ndarray, pose: Pose, K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
  """Vectorized pinhole projection; points on the camera plane get NaN pixels."""
  cam = np.asarray(points, dtype=np.float64).reshape(-1, 3) @ pose.rotation.T + pose.translation
  z = cam[:, 2]
  on_plane = np.abs(z) <= CAMERA_PLANE_EPS
  safe = np.where(on_plane, 1.0, z)
  u = np.where(on_plane, np.nan, K.fx * cam[:, 0] / safe + K.cx)
  v = np.where(on_plane, np.nan, K.fy * cam[:, 1] / safe + K.cy)
  return u, v, z


def project_point(p: Sequence[float], pose: Pose, K: CameraIntrinsics) -> Tuple[float, float, float]:
  u, v, z = project_points(np.asarray(p, dtype=np.float64)[None, :], pose, K)
  return float(u[0]), float(v[0]), float(z[0])


def inverse_map_points(u: np.ndarray, v: np.ndarray, z: np.ndarray, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
  z = np.asarray(z, dtype=np.float64)
  if np.any(~(z > 0)):
    raise LogicError("inverse_map requires depth z > 0")
  cam = np.stack([(np.asarray(u) - K.cx) * z / K.fx, (np.asarray(v) - K.cy) * z / K.fy, z], axis=-1)
  return (cam - pose.translation) @ pose.rotation


def inverse_map(u: float, v: float, z: float, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
  return inverse_map_points(np.array([u]), np.array([v]), np.array([z]), pose, K)[0]


@dataclass(frozen=True)
class ViewRender:
  depth: np.ndarray  # (H, W) float64, +inf where empty
  image: np.ndarray  # (H, W, 3) float32 in [0, 1]
  owner: np.ndarray  # (H, W) int64, -1 where empty
  pose_index: int = 0

  @property
  def occupied(self) -> np.ndarray:
    return self.owner >= 0

  def correspondences(self) -> np.ndarray:
    """(M, 3) int64 rows of (point_index, u, v), ordered by pixel."""
    v, u = np.nonzero(self.owner >= 0)
    return np.stack([self.owner[v, u], u, v], axis=1).astype(np.int64)


@dataclass
class CorrespondenceSet:
  views: List[np.ndarray]

  @staticmethod
  def from_renders(renders: Sequence[ViewRender]) -> "CorrespondenceSet":
    return CorrespondenceSet([r.correspondences() for r in renders])

  def visibility_count(self, n_points: int) -> np.ndarray:
    count = np.zeros(n_points, dtype=np.int64)
    for entries in self.views:
      np.add.at(count, entries[:, 0], 1)
    return count


def depth_to_intensity(depth: np.ndarray) -> np.ndarray:
  """Per-view min-max normalized inverse depth; empty pixels map to 0."""
  d = np.asarray(depth)
  occupied = np.isfinite(d)
  out = np.zeros(d.shape, dtype=d.dtype if np.issubdtype(d.dtype, np.floating) else np.float64)
  if not occupied.any():
    return out
  z = d[occupied]
  z_min, z_max = z.min(), z.max()
  if z_max > z_min:
    out[occupied] = (z_max - z) / (z_max - z_min)
  else:
    out[occupied] = 1.0
  return out


def render_view(cloud: PointCloud, pose: Pose, K: CameraIntrinsics, pose_index: int = 0) -> ViewRender:
  H, W = K.height, K.width
  u, v, z = project_points(cloud.points, pose, K)
  visible = z > CAMERA_PLANE_EPS
  idx = np.flatnonzero(visible)
  # round half down: pixel u covers (u - 1/2, u + 1/2]
  ui = np.ceil(u[idx] - 0.5).astype(np.int64)
  vi = np.ceil(v[idx] - 0.5).astype(np.int64)
  inside = (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
  idx, ui, vi = idx[inside], ui[inside], vi[inside]
  depth = np.full((H, W), np.inf)
  owner = np.full((H, W), -1, dtype=np.int64)
  if idx.size:
    pix = vi * W + ui
    order = np.lexsort((idx, z[idx], pix))
    _, first = np.unique(pix[order], return_index=True)
    win = order[first]
    depth.flat[pix[win]] = z[idx[win]]
    owner.flat[pix[win]] = idx[win]
  intensity = depth_to_intensity(depth.astype(np.float32))
  image = np.repeat(intensity[:, :, None], 3, axis=2)
  return ViewRender(depth, image, owner, pose_index)


def render_views(
  cloud: PointCloud,
  poses: Sequence[Pose],
  K: CameraIntrinsics,
  workers: int = 1,
) -> List[ViewRender]:
  jobs = list(enumerate(poses))
  if workers <= 1 or len(jobs) == 1:
    return [render_view(cloud, pose, K, k) for k, pose in jobs]
  with ThreadPoolExecutor(max_workers=workers) as pool:
    return list(pool.map(lambda job: render_view(cloud, job[1], K, job[0]), jobs))


def downsample(image: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
  """Block-mean (area) pooling by an integer factor per axis."""
  h, w = int(target[0]), int(target[1])
  H, W = image.shape[0], image.shape[1]
  if h < 1 or w < 1 or H % h or W % w:
    raise ConfigError(
      f"cannot downsample {H}x{W} to {h}x{w}: the ratio must be an integer; "
      f"pick a render resolution that is a multiple of {w}"
    )
  sh, sw = H // h, W // w
  rest = image.shape[2:]
  blocks = image.reshape((h, sh, w, sw) + rest)
  return blocks.mean(axis=(1, 3), dtype=np.float64).astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64)


def network_image(render: ViewRender, input_resolution: int) -> np.ndarray:
  return downsample(render.image, (input_resolution, input_resolution))


def interior_empty_fraction(image: np.ndarray) -> float:
  """Fraction of empty pixels inside each row's occupied span."""
  occ = np.asarray(image)
  if occ.ndim == 3:
    occ = occ.max(axis=2)
  occ = occ > 0
  total = empty = 0
  for row in occ:
    cols = np.flatnonzero(row)
    if cols.size < 2:
      continue
    span = row[cols[0]:cols[-1] + 1]
    total += span.size
    empty += int((~span).sum())
  return empty / total if total else 0.0


def block_index(entries: np.ndarray, factor: int) -> np.ndarray:
  """Map render-resolution correspondences to the downsampled grid."""
  out = entries.copy()
  out[:, 1:] //= factor
  return out
