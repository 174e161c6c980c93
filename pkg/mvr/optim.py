"""AdamW with AMSGrad and per-tensor update RMS clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import ConfigError, NumericError


@dataclass
class OptimizerConfig:
  lr: float = 2e-4
  weight_decay: float = 1e-5
  betas: Tuple[float, float] = (0.9, 0.999)
  eps: float = 1e-8
  amsgrad: bool = True
  update_clip: float = 1.0  # max RMS of a tensor's update before lr; 0 disables

  def validate(self) -> "OptimizerConfig":
    if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
      raise ConfigError("lr and weight_decay must be >= 0 and eps > 0")
    b1, b2 = self.betas
    if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
      raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
    if self.update_clip < 0:
      raise ConfigError("update_clip must be >= 0")
    return self


@dataclass
class OptimizerState:
  m: Dict[str, np.ndarray] = field(default_factory=dict)
  v: Dict[str, np.ndarray] = field(default_factory=dict)
  v_max: Dict[str, np.ndarray] = field(default_factory=dict)
  step: int = 0

  @staticmethod
  def create(params: Mapping[str, np.ndarray]) -> "OptimizerState":
    state = OptimizerState()
    for name, w in params.items():
      state.m[name] = np.zeros_like(w)
      state.v[name] = np.zeros_like(w)
      state.v_max[name] = np.zeros_like(w)
    return state


def optimizer_step(
  state: OptimizerState,
  params: Mapping[str, np.ndarray],
  grads: Mapping[str, np.ndarray],
  config: OptimizerConfig,
) -> Dict[str, np.ndarray]:
  """Return updated weights; moments and the step counter advance in ``state``.

  Nothing is touched when any gradient is non-finite.
  """
  for name in sorted(params):
    g = grads.get(name)
    if g is None:
      continue
    if g.shape != params[name].shape:
      raise ConfigError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
    if not np.all(np.isfinite(g)):
      raise NumericError(f"non-finite gradient for {name}", state.step + 1)

  b1, b2 = config.betas
  t = state.step + 1
  bc1 = 1.0 - b1 ** t
  bc2 = 1.0 - b2 ** t
  out: Dict[str, np.ndarray] = {}
  for name in sorted(params):
    w = params[name]
    g = grads.get(name)
    if g is None:
      g = np.zeros_like(w)
    m = state.m.setdefault(name, np.zeros_like(w))
    v = state.v.setdefault(name, np.zeros_like(w))
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * (g * g)
    v_max = np.maximum(state.v_max.get(name, np.zeros_like(w)), v)
    state.m[name], state.v[name], state.v_max[name] = m, v, v_max
    second = v_max if config.amsgrad else v
    update = (m / bc1) / (np.sqrt(second / bc2) + config.eps)
    if config.update_clip > 0:
      rms = math.sqrt(float(np.mean(np.square(update, dtype=np.float64)))) if update.size else 0.0
      if rms > config.update_clip:
        update = update * (config.update_clip / rms)
    new = w - config.lr * config.weight_decay * w - config.lr * update
    out[name] = new.astype(w.dtype, copy=False)
  state.step = t
  return out
