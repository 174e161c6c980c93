"""Staged teacher/student pipeline from a point cloud to anomaly scores.

Stages share a mutable ``context`` dict that carries metrics and, during
training, the active :class:`~mvr.autograd.GradTape`::

  views -> encode -> reconstruct -> fuse -> score

``views`` renders (or loads) the view bundle, ``encode`` runs the frozen
teacher on every view and builds the projection plan, ``reconstruct`` runs
the student, ``fuse`` lifts both to the points and ``score`` compares them.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .backbone import EncoderConfig, WeightArchive, encode_tokens
from .bundle import ViewBundle, prepare_views
from .config import RunConfig
from .fusion import AnomalyResult, FusedPointFeatures, ProjectionPlan, anomaly_scores, project_tokens
from .log import logger
from .pointcloud import PointCloud
from .projection import block_index
from .reconstruction import DecoderConfig, mean_stack, student_tokens


@dataclass
class CloudFeatures:
  """Everything about one cloud that does not depend on student weights."""

  name: str
  n_points: int
  plan: ProjectionPlan
  teacher_mean: np.ndarray  # (V, T, D) tap-averaged teacher tokens per view
  teacher_fused: np.ndarray  # (N, D)
  bundle: Optional[ViewBundle] = None

  @property
  def visible(self) -> np.ndarray:
    return self.plan.visibility_count > 0

  def release_bundle(self) -> "CloudFeatures":
    self.bundle = None
    return self


def safe_name(name: str) -> str:
  return re.sub(r"[^A-Za-z0-9_.-]+", "_", name) or "cloud"


class ViewStage:
  def __init__(self, config: RunConfig, workers: int = 1, cache_root: Optional[Path] = None) -> None:
    self.config = config
    self.workers = workers
    self.cache_root = cache_root

  def process(self, cloud: PointCloud, context: Dict[str, Any]) -> ViewBundle:
    directory = self.cache_root / safe_name(cloud.name) if self.cache_root is not None else None
    bundle, wrote = prepare_views(cloud, self.config, directory, self.workers)
    context.setdefault("bundles_written", 0)
    context["bundles_written"] += int(wrote)
    return bundle


class EncodeStage:
  def __init__(self, config: RunConfig, teacher: Mapping[str, np.ndarray], workers: int = 1) -> None:
    self.config = config
    self.encoder: EncoderConfig = config.encoder_config()
    self.teacher = teacher
    self.workers = workers

  def _encode_one(self, image: np.ndarray) -> np.ndarray:
    return mean_stack(encode_tokens(image, self.encoder, self.teacher))

  def process(self, bundle: ViewBundle, context: Dict[str, Any]) -> CloudFeatures:
    res = self.config.input_resolution
    images = bundle.images(res)
    # one view per task keeps results independent of the worker count
    if self.workers > 1 and len(images) > 1:
      with ThreadPoolExecutor(max_workers=self.workers) as pool:
        per_view = list(pool.map(self._encode_one, images))
    else:
      per_view = [self._encode_one(img) for img in images]
    teacher_mean = np.stack(per_view).astype(np.float32)
    factor = self.config.downsample_factor
    entries = [block_index(e, factor) for e in bundle.correspondences.views]
    g = self.encoder.grid
    plan = ProjectionPlan.build(entries, (g, g), (res, res), bundle.cloud.n, self.config.fusion_mode)
    context.setdefault("clouds_encoded", 0)
    context["clouds_encoded"] += 1
    return CloudFeatures(
      name=bundle.cloud.name,
      n_points=bundle.cloud.n,
      plan=plan,
      teacher_mean=teacher_mean,
      teacher_fused=plan.apply(teacher_mean),
      bundle=bundle,
    )


class ReconstructStage:
  def __init__(self, decoder: DecoderConfig, student: Mapping[str, np.ndarray]) -> None:
    self.decoder = decoder
    self.student = student

  def process(self, features: CloudFeatures, context: Dict[str, Any]) -> Tuple[CloudFeatures, np.ndarray]:
    _, pooled = student_tokens(features.teacher_mean, self.student, self.decoder, context.get("tape"))
    return features, pooled


class FusionStage:
  def process(self, data: Tuple[CloudFeatures, np.ndarray], context: Dict[str, Any]) -> FusedPointFeatures:
    features, pooled = data
    student = project_tokens(pooled, features.plan, context.get("tape"))
    context["view_visible_counts"] = list(features.plan.view_counts)
    return FusedPointFeatures(features.teacher_fused, student, features.plan.visibility_count)


class ScoreStage:
  def process(self, fused: FusedPointFeatures, context: Dict[str, Any]) -> AnomalyResult:
    result = anomaly_scores(fused, context.get("view_visible_counts"))
    context.setdefault("invisible_points", 0)
    context["invisible_points"] += result.invisible_count
    return result


class MVRPipeline:
  """Teacher/student anomaly pipeline over shared read-only weights."""

  def __init__(
    self,
    config: RunConfig,
    teacher: Union[WeightArchive, Mapping[str, np.ndarray]],
    student: Union[WeightArchive, Mapping[str, np.ndarray]],
    workers: int = 1,
    cache_root: Optional[Union[str, Path]] = None,
  ) -> None:
    self.config = config
    self.decoder = config.decoder_config()
    t = teacher.tensors if isinstance(teacher, WeightArchive) else teacher
    s = student.tensors if isinstance(student, WeightArchive) else student
    root = Path(cache_root) if cache_root is not None else None
    self.stages: Dict[str, Any] = {
      "views": ViewStage(config, workers, root),
      "encode": EncodeStage(config, t, workers),
      "reconstruct": ReconstructStage(self.decoder, s),
      "fuse": FusionStage(),
      "score": ScoreStage(),
    }

  def _run(self, data: Any, names: List[str], context: Dict[str, Any]) -> Any:
    result = data
    for name in names:
      with logger.timed("stage", name=name):
        result = self.stages[name].process(result, context)
    return result

  def prepare(self, cloud: PointCloud, context: Optional[Dict[str, Any]] = None) -> CloudFeatures:
    """Render and encode; the result is reusable across student updates."""
    return self._run(cloud, ["views", "encode"], {} if context is None else context)

  def score(self, features: CloudFeatures, context: Optional[Dict[str, Any]] = None) -> AnomalyResult:
    return self._run(features, ["reconstruct", "fuse", "score"], {} if context is None else context)

  def run(self, cloud: PointCloud, context: Optional[Dict[str, Any]] = None) -> AnomalyResult:
    if context is None:
      context = {}
    return self._run(cloud, list(self.stages), context)
