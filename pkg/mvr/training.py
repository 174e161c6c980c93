"""Student training loop: forward with tape, hard-mined cosine loss, manual
backward and AdamW/AMSGrad updates. The teacher is never written to."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import GradTape, backward_pass
from .backbone import WeightArchive, init_weights, load_weights
from .config import RunConfig
from .errors import DataError, NumericError
from .fusion import project_tokens
from .io_utils import atomic_write_text
from .layers import Grads, accumulate
from .log import logger
from .loss import LossConfig, LossResult, global_cosine_loss
from .optim import OptimizerState, optimizer_step
from .pipeline import CloudFeatures, MVRPipeline
from .pointcloud import DatasetSplit
from .reconstruction import DecoderConfig, init_student_weights, student_tokens

__all__ = [
  "TrainResult",
  "backward_pass",
  "batch_loss",
  "load_teacher",
  "train",
  "train_features",
]

LOG_HEADER = ("step", "loss", "lr", "wall_ms")


@dataclass
class TrainResult:
  teacher: WeightArchive
  student: WeightArchive
  losses: List[float] = field(default_factory=list)
  log_path: Optional[Path] = None
  final_path: Optional[Path] = None

  @property
  def combined(self) -> WeightArchive:
    return self.teacher.merged(self.student)


def load_teacher(config: RunConfig) -> WeightArchive:
  """Imported encoder weights when configured, else the seeded random teacher."""
  encoder = config.encoder_config()
  if config.teacher_weights:
    return load_weights(config.teacher_weights, encoder)
  return init_weights(encoder, config.seed)


def batch_loss(
  batch: Sequence[CloudFeatures],
  params: Mapping[str, np.ndarray],
  decoder: DecoderConfig,
  loss_config: LossConfig,
  loss_mode: str = "fused",
) -> Tuple[LossResult, Grads]:
  """One forward/backward over a batch of prepared clouds.

  ``fused`` compares fused point features of visible points; ``per_view``
  compares each view's pooled patch maps.
  """
  tapes: List[GradTape] = []
  teacher: List[np.ndarray] = []
  student: List[np.ndarray] = []
  shapes: List[Tuple[int, ...]] = []
  for cf in batch:
    tape = GradTape()
    _, pooled = student_tokens(cf.teacher_mean, params, decoder, tape)
    if loss_mode == "fused":
      fused = project_tokens(pooled, cf.plan, tape)
      vis = cf.visible
      teacher.append(cf.teacher_fused[vis])
      student.append(fused[vis])
      shapes.append(fused.shape)
    else:
      teacher.extend(cf.teacher_mean)
      student.extend(pooled)
      shapes.append(pooled.shape)
    tapes.append(tape)

  result = global_cosine_loss(teacher, student, loss_config)

  grads: Grads = {}
  offset = 0
  for cf, tape, shape in zip(batch, tapes, shapes):
    if loss_mode == "fused":
      upstream = np.zeros(shape, dtype=result.grads[offset].dtype)
      upstream[cf.visible] = result.grads[offset]
      offset += 1
    else:
      views = shape[0]
      upstream = np.stack(result.grads[offset:offset + views])
      offset += views
    param_grads, _ = backward_pass(tape, upstream)
    accumulate(grads, param_grads)
  return result, grads


def _log_csv(rows: List[Tuple[int, float, float, float]]) -> str:
  buf = io.StringIO()
  writer = csv.writer(buf, lineterminator="\n")
  writer.writerow(LOG_HEADER)
  for step, loss, lr, wall in rows:
    writer.writerow([step, f"{loss:.8f}", f"{lr:g}", f"{wall:.1f}"])
  return buf.getvalue()


def train_features(
  features: Sequence[CloudFeatures],
  config: RunConfig,
  teacher: WeightArchive,
  student: Optional[WeightArchive] = None,
  out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
  """Optimize the student on already prepared clouds."""
  if not features:
    raise DataError("training needs at least one normal cloud")
  decoder = config.decoder_config()
  loss_config = config.loss_config().validate()
  opt_config = config.optimizer_config().validate()
  student = student if student is not None else init_student_weights(decoder, config.seed + 1)
  student.validate_against(decoder.student_shapes())
  params: Dict[str, np.ndarray] = {k: v.copy() for k, v in student.tensors.items()}
  state = OptimizerState.create(params)
  rng = np.random.default_rng(config.seed)
  out = Path(out_dir) if out_dir is not None else None
  batch_size = min(config.batch_size, len(features))
  rows: List[Tuple[int, float, float, float]] = []
  losses: List[float] = []
  for step in range(1, config.iterations + 1):
    t0 = time.perf_counter()
    picks = rng.choice(len(features), size=batch_size, replace=False)
    batch = [features[int(i)] for i in picks]
    try:
      outcome, grads = batch_loss(batch, params, decoder, loss_config, config.loss_mode)
      params = optimizer_step(state, params, grads, opt_config)
    except NumericError as exc:
      if exc.step is not None:
        raise
      raise NumericError(f"training diverged: {exc}", step) from exc
    wall = (time.perf_counter() - t0) * 1000.0
    losses.append(outcome.loss)
    rows.append((step, outcome.loss, opt_config.lr, wall))
    logger.debug("train", step=step, loss=outcome.loss, lr=opt_config.lr, wall_ms=wall)
    if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
      teacher.merged(WeightArchive(params)).save(out / f"ckpt_{step:05d}.mvrw")
  trained = WeightArchive(params)
  result = TrainResult(teacher, trained, losses)
  if out is not None:
    result.log_path = atomic_write_text(out / "train_log.csv", _log_csv(rows))
    result.final_path = result.combined.save(out / "final.mvrw")
  return result


def train(
  dataset: DatasetSplit,
  config: RunConfig,
  teacher: Optional[WeightArchive] = None,
  out_dir: Optional[Union[str, Path]] = None,
  cache_root: Optional[Union[str, Path]] = None,
  workers: int = 1,
) -> TrainResult:
  """Render and encode every training cloud once, then train the student."""
  if not dataset.train:
    raise DataError("training split is empty")
  teacher = teacher if teacher is not None else load_teacher(config)
  decoder = config.decoder_config()
  student = init_student_weights(decoder, config.seed + 1)
  pipeline = MVRPipeline(config, teacher, student, workers, cache_root)
  context: Dict[str, int] = {}
  features = [pipeline.prepare(cloud, context).release_bundle() for cloud in dataset.train]
  logger.debug("prepared", len(features), "training clouds", context)
  return train_features(features, config, teacher, student, out_dir)
