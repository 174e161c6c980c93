"""Student network: bottleneck MLP, linear-attention decoder, layer pooling.

Student tensors live under ``student.`` in the same archive format as the
teacher. Decoder block ``l`` is paired with teacher tap ``l``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import GradTape, register_backward
from .backbone import EncoderConfig, FeatureMap, WeightArchive, init_tensors
from .errors import ConfigError
from .layers import (
  ATTENTION_KINDS,
  Grads,
  accumulate,
  block_backward,
  block_forward,
  block_shapes,
  mlp_backward,
  mlp_forward,
)

STUDENT_PREFIX = "student."
BOTTLENECK_PREFIX = STUDENT_PREFIX + "bottleneck."
DECODER_PREFIX = STUDENT_PREFIX + "decoder."

Weights = Union[WeightArchive, Mapping[str, np.ndarray]]


def _params(weights: Weights) -> Mapping[str, np.ndarray]:
  return weights.tensors if isinstance(weights, WeightArchive) else weights


@dataclass(frozen=True)
class BottleneckParams:
  embed_dim: int
  fusion: str = "mean"

  def tensor_shapes(self, prefix: str = BOTTLENECK_PREFIX) -> Dict[str, Tuple[int, ...]]:
    d = self.embed_dim
    return {
      prefix + "fc1.weight": (d, d),
      prefix + "fc1.bias": (d,),
      prefix + "fc2.weight": (d, d),
      prefix + "fc2.bias": (d,),
    }


@dataclass
class DecoderConfig:
  depth: int
  embed_dim: int
  heads: int
  mlp_ratio: int = 4
  attention: str = "linear"
  grid: int = 16

  @staticmethod
  def for_encoder(encoder: EncoderConfig) -> "DecoderConfig":
    return DecoderConfig(
      depth=len(encoder.tap_layers),
      embed_dim=encoder.embed_dim,
      heads=encoder.heads,
      mlp_ratio=encoder.mlp_ratio,
      grid=encoder.grid,
    )

  @property
  def bottleneck(self) -> BottleneckParams:
    return BottleneckParams(self.embed_dim)

  def validate(self) -> "DecoderConfig":
    if self.depth < 1:
      raise ConfigError("decoder depth must be >= 1")
    if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
      raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
    if self.attention not in ATTENTION_KINDS:
      raise ConfigError(f"attention must be one of {', '.join(ATTENTION_KINDS)}")
    return self

  def tensor_shapes(self, prefix: str = DECODER_PREFIX) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for l in range(self.depth):
      shapes.update(block_shapes(f"{prefix}blocks.{l}.", self.embed_dim, self.mlp_ratio))
    return shapes

  def student_shapes(self) -> Dict[str, Tuple[int, ...]]:
    shapes = self.bottleneck.tensor_shapes()
    shapes.update(self.tensor_shapes())
    return shapes


def init_student_weights(config: DecoderConfig, seed: int) -> WeightArchive:
  return init_tensors(config.validate().student_shapes(), seed)


# ---------------------------------------------------------------------------
# Token-level ops (batched, tape aware)
# ---------------------------------------------------------------------------

def mean_stack(arrays: Sequence[np.ndarray]) -> np.ndarray:
  if not arrays:
    raise ConfigError("cannot average an empty list of feature maps")
  shape = arrays[0].shape
  for a in arrays[1:]:
    if a.shape != shape:
      raise ConfigError(f"feature maps disagree in shape: {shape} vs {a.shape}")
  acc = arrays[0].copy()
  for a in arrays[1:]:
    acc += a
  return acc / len(arrays)


def aggregate_tokens(arrays: Sequence[np.ndarray], tape: Optional[GradTape] = None) -> np.ndarray:
  out = mean_stack(arrays)
  if tape is not None:
    tape.record("aggregate", len(arrays))
  return out


@register_backward("aggregate")
def _aggregate_backward(g: np.ndarray, j: int) -> Tuple[List[np.ndarray], Grads]:
  share = g / j
  return [share] * j, {}


def bottleneck_tokens(
  x: np.ndarray,
  params: Mapping[str, np.ndarray],
  tape: Optional[GradTape] = None,
  prefix: str = BOTTLENECK_PREFIX,
) -> np.ndarray:
  """Per-token MLP over the already tap-averaged teacher tokens."""
  y, cache = mlp_forward(x, params, prefix)
  if tape is not None:
    tape.record("bottleneck", cache)
  return y


@register_backward("bottleneck")
def _bottleneck_backward(g: np.ndarray, cache: Any) -> Tuple[np.ndarray, Grads]:
  return mlp_backward(g, cache)


def decode_tokens(
  latent: np.ndarray,
  params: Mapping[str, np.ndarray],
  config: DecoderConfig,
  tape: Optional[GradTape] = None,
  prefix: str = DECODER_PREFIX,
) -> List[np.ndarray]:
  x = latent
  outs: List[np.ndarray] = []
  caches: List[Any] = []
  for l in range(config.depth):
    x, cache = block_forward(x, params, f"{prefix}blocks.{l}.", config.heads, config.attention)
    outs.append(x)
    caches.append(cache)
  if tape is not None:
    tape.record("decoder", caches)
  return outs


@register_backward("decoder")
def _decoder_backward(gs: Sequence[np.ndarray], caches: List[Any]) -> Tuple[np.ndarray, Grads]:
  grads: Grads = {}
  carry: Optional[np.ndarray] = None
  for l in reversed(range(len(caches))):
    g = gs[l] if carry is None else gs[l] + carry
    carry, g_block = block_backward(g, caches[l])
    accumulate(grads, g_block)
  return carry, grads


def student_tokens(
  teacher_mean: np.ndarray,
  params: Mapping[str, np.ndarray],
  config: DecoderConfig,
  tape: Optional[GradTape] = None,
) -> Tuple[List[np.ndarray], np.ndarray]:
  """Bottleneck, decoder and layer pooling; returns (per-layer maps, pooled map)."""
  latent = bottleneck_tokens(teacher_mean, params, tape)
  maps = decode_tokens(latent, params, config, tape)
  return maps, aggregate_tokens(maps, tape)


# ---------------------------------------------------------------------------
# FeatureMap API
# ---------------------------------------------------------------------------

def _check_same(maps: Sequence[FeatureMap]) -> None:
  if not maps:
    raise ConfigError("at least one feature map is required")
  first = maps[0]
  for m in maps[1:]:
    if (m.grid_h, m.grid_w, m.channels) != (first.grid_h, first.grid_w, first.channels):
      raise ConfigError("feature maps disagree in grid or channel dims")


def aggregate_layers(maps: Sequence[FeatureMap]) -> FeatureMap:
  _check_same(maps)
  first = maps[0]
  return FeatureMap(first.grid_h, first.grid_w, first.channels, mean_stack([m.data for m in maps]))


def bottleneck_forward(taps: Sequence[FeatureMap], weights: Weights,
                       prefix: str = BOTTLENECK_PREFIX) -> FeatureMap:
  _check_same(taps)
  params = _params(weights)
  first = taps[0]
  if params[prefix + "fc1.weight"].shape[0] != first.channels:
    raise ConfigError(
      f"bottleneck expects {params[prefix + 'fc1.weight'].shape[0]} channels, got {first.channels}"
    )
  mean = mean_stack([t.tokens for t in taps])
  out = bottleneck_tokens(mean, params, prefix=prefix)
  return FeatureMap.from_tokens(out, first.grid_h, first.grid_w)


def decoder_forward(latent: FeatureMap, config: DecoderConfig, weights: Weights,
                    prefix: str = DECODER_PREFIX) -> List[FeatureMap]:
  if latent.channels != config.embed_dim:
    raise ConfigError(f"latent has {latent.channels} channels, decoder expects {config.embed_dim}")
  params = _params(weights)
  outs = decode_tokens(latent.tokens, params, config, prefix=prefix)
  return [FeatureMap.from_tokens(o, latent.grid_h, latent.grid_w) for o in outs]
