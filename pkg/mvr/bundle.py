from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .config import RunConfig
from .errors import DataError
from .io_utils import atomic_write_bytes, atomic_write_json, read_json, sha256_bytes
from .log import logger
from .pointcloud import PointCloud, normalize, round_half_up, scores_to_colors
from .projection import (
  CameraIntrinsics,
  CorrespondenceSet,
  Pose,
  ViewRender,
  default_intrinsics,
  depth_to_intensity,
  generate_view_poses,
  network_image,
  render_views,
)

BUNDLE_VERSION = 1
CORRESPONDENCE_DTYPE = np.dtype([("point", "<u4"), ("u", "<u2"), ("v", "<u2")])


@dataclass
class ViewBundle:
  cloud: PointCloud  # normalized
  renders: List[ViewRender]
  poses: List[Pose]
  intrinsics: CameraIntrinsics
  center: np.ndarray
  scale: float
  key: str = ""

  @property
  def correspondences(self) -> CorrespondenceSet:
    return CorrespondenceSet.from_renders(self.renders)

  def images(self, input_resolution: int) -> List[np.ndarray]:
    return [network_image(r, input_resolution) for r in self.renders]


def bundle_key(cloud: PointCloud, config: RunConfig) -> str:
  params = {
    "version": BUNDLE_VERSION,
    "render_resolution": config.render_resolution,
    "input_resolution": config.input_resolution,
    "n_views": config.n_views,
    "camera_radius": config.camera_radius,
    "focal_length": config.focal_length,
  }
  blob = cloud.points.tobytes() + json.dumps(params, sort_keys=True).encode("utf-8")
  return sha256_bytes(blob)


def render_bundle(cloud: PointCloud, config: RunConfig, workers: int = 1) -> ViewBundle:
  normed, center, scale = normalize(cloud)
  K = default_intrinsics(config.render_resolution, config.focal_length)
  poses = generate_view_poses(config.n_views, config.camera_radius)
  renders = render_views(normed, poses, K, workers)
  return ViewBundle(normed, renders, poses, K, center, scale, bundle_key(cloud, config))


def _png_bytes(pixels: np.ndarray) -> bytes:
  buf = io.BytesIO()
  Image.fromarray(pixels).save(buf, format="PNG")
  return buf.getvalue()


def write_bundle(bundle: ViewBundle, directory: Union[str, Path], config: RunConfig) -> Path:
  d = Path(directory)
  d.mkdir(parents=True, exist_ok=True)
  chunks = []
  for k, render in enumerate(bundle.renders):
    small = network_image(render, config.input_resolution)[:, :, 0]
    gray = np.clip(round_half_up(small * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(d / f"view_{k:02}.png", _png_bytes(gray))
    atomic_write_bytes(d / f"view_{k:02}.depth.f32", render.depth.astype("<f4").tobytes(order="C"))
    entries = render.correspondences()
    rec = np.empty(entries.shape[0], dtype=CORRESPONDENCE_DTYPE)
    rec["point"], rec["u"], rec["v"] = entries[:, 0], entries[:, 1], entries[:, 2]
    chunks.append(np.array([entries.shape[0]], dtype="<u4").tobytes() + rec.tobytes())
  atomic_write_bytes(d / "correspondence.bin", b"".join(chunks))
  # meta last: its presence marks a complete bundle
  atomic_write_json(d / "meta.json", {
    "version": BUNDLE_VERSION,
    "key": bundle.key,
    "name": bundle.cloud.name,
    "n_points": bundle.cloud.n,
    "resolution": config.render_resolution,
    "input_resolution": config.input_resolution,
    "intrinsics": bundle.intrinsics.to_json(),
    "poses": [p.to_json() for p in bundle.poses],
    "normalization": {"center": bundle.center.tolist(), "scale": bundle.scale},
  })
  return d


def is_up_to_date(directory: Union[str, Path], key: str) -> bool:
  meta = Path(directory) / "meta.json"
  if not meta.exists():
    return False
  try:
    return read_json(meta).get("key") == key
  except DataError:
    return False


def _read_correspondences(path: Path, n_views: int, n_points: int) -> List[np.ndarray]:
  raw = path.read_bytes()
  views: List[np.ndarray] = []
  off = 0
  for k in range(n_views):
    if off + 4 > len(raw):
      raise DataError(f"{path}: truncated at view {k}")
    count = int(np.frombuffer(raw, dtype="<u4", count=1, offset=off)[0])
    off += 4
    size = count * CORRESPONDENCE_DTYPE.itemsize
    if off + size > len(raw):
      raise DataError(f"{path}: truncated records in view {k}")
    rec = np.frombuffer(raw, dtype=CORRESPONDENCE_DTYPE, count=count, offset=off)
    off += size
    entries = np.stack([rec["point"], rec["u"], rec["v"]], axis=1).astype(np.int64)
    if entries.size and entries[:, 0].max() >= n_points:
      raise DataError(f"{path}: point index out of range in view {k}")
    views.append(entries)
  if off != len(raw):
    raise DataError(f"{path}: trailing bytes after {n_views} views")
  return views


def load_bundle(directory: Union[str, Path], cloud: PointCloud) -> ViewBundle:
  d = Path(directory)
  meta = read_json(d / "meta.json")
  intr = meta["intrinsics"]
  K = CameraIntrinsics(intr["fx"], intr["fy"], intr["cx"], intr["cy"], int(intr["width"]), int(intr["height"]))
  poses = [Pose.from_json(p) for p in meta["poses"]]
  if int(meta["n_points"]) != cloud.n:
    raise DataError(f"{d}: bundle was rendered for {meta['n_points']} points, cloud has {cloud.n}")
  views = _read_correspondences(d / "correspondence.bin", len(poses), cloud.n)
  renders: List[ViewRender] = []
  for k, entries in enumerate(views):
    depth = np.fromfile(d / f"view_{k:02}.depth.f32", dtype="<f4")
    if depth.size != K.width * K.height:
      raise DataError(f"{d}: depth of view {k} has {depth.size} values, expected {K.width * K.height}")
    depth = depth.reshape(K.height, K.width)
    owner = np.full((K.height, K.width), -1, dtype=np.int64)
    owner[entries[:, 2], entries[:, 1]] = entries[:, 0]
    if np.any((owner >= 0) != np.isfinite(depth)):
      raise DataError(f"{d}: owner grid and depth disagree in view {k}")
    image = np.repeat(depth_to_intensity(depth)[:, :, None], 3, axis=2)
    renders.append(ViewRender(depth.astype(np.float64), image, owner, k))
  norm = meta["normalization"]
  center = np.asarray(norm["center"], dtype=np.float64)
  scale = float(norm["scale"])
  normed = cloud.with_points((cloud.points - center) / scale)
  return ViewBundle(normed, renders, poses, K, center, scale, str(meta.get("key", "")))


def prepare_views(
  cloud: PointCloud,
  config: RunConfig,
  directory: Optional[Union[str, Path]] = None,
  workers: int = 1,
) -> Tuple[ViewBundle, bool]:
  """Load an up-to-date bundle or render one, writing it when `directory` is set.

  Returns the bundle and whether anything was written.
  """
  key = bundle_key(cloud, config)
  if directory is not None and is_up_to_date(directory, key):
    logger.debug("bundle up to date", directory)
    return load_bundle(directory, cloud), False
  bundle = render_bundle(cloud, config, workers)
  if directory is not None:
    write_bundle(bundle, directory, config)
    logger.debug("bundle written", directory)
    return bundle, True
  return bundle, False


def write_heatmaps(
  bundle: ViewBundle,
  point_scores: Sequence[float],
  directory: Union[str, Path],
) -> List[Path]:
  """Splat per-point scores to their owner pixels, one RGB PNG per view."""
  scores = np.asarray(point_scores, dtype=np.float64)
  colors = scores_to_colors(scores)
  out: List[Path] = []
  for k, render in enumerate(bundle.renders):
    rgb = np.zeros(render.owner.shape + (3,), dtype=np.uint8)
    occ = render.owner >= 0
    rgb[occ] = colors[render.owner[occ]]
    out.append(atomic_write_bytes(Path(directory) / f"heatmap_{k:02}.png", _png_bytes(rgb)))
  return out
