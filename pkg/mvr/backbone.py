"""Vision-transformer encoder used as the frozen teacher.

Weights live in a :class:`WeightArchive`, a flat name -> float32 tensor map
stored in a small binary format::

  b"MVRW1"
  repeated: u32 name length, name (utf-8), u32 rank, rank x u64 dims,
            float32 little-endian row-major data

Tensors are written sorted by name so equal archives give equal bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from .errors import ConfigError, DataError, WeightArchiveError
from .io_utils import atomic_write_bytes
from .layers import block_forward, block_shapes, patch_embed_forward

ARCHIVE_MAGIC = b"MVRW1"
ARCHIVE_VERSION = 1
TEACHER_PREFIX = "teacher."
INIT_STD = 0.02


@dataclass
class EncoderConfig:
  image_size: int = 224
  patch_size: int = 14
  embed_dim: int = 128
  depth: int = 6
  heads: int = 4
  tap_layers: List[int] = field(default_factory=lambda: [1, 2, 3, 4])
  mlp_ratio: int = 4

  @property
  def grid(self) -> int:
    return self.image_size // self.patch_size

  @property
  def tokens(self) -> int:
    return self.grid * self.grid

  @property
  def j(self) -> int:
    return len(self.tap_layers)

  def validate(self) -> "EncoderConfig":
    if self.patch_size < 1 or self.image_size < self.patch_size or self.image_size % self.patch_size:
      raise ConfigError(
        f"image_size {self.image_size} must be a positive multiple of patch_size {self.patch_size}"
      )
    if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
      raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
    if self.depth < 1:
      raise ConfigError("encoder depth must be >= 1")
    if self.mlp_ratio < 1:
      raise ConfigError("mlp_ratio must be >= 1")
    taps = list(self.tap_layers)
    if not taps:
      raise ConfigError("at least one tap layer is required")
    if any(b <= a for a, b in zip(taps, taps[1:])):
      raise ConfigError(f"tap_layers must be strictly increasing, got {taps}")
    if taps[0] < 0 or taps[-1] >= self.depth:
      raise ConfigError(f"tap_layers must lie in [0, {self.depth}), got {taps}")
    return self

  def tensor_shapes(self, prefix: str = TEACHER_PREFIX) -> Dict[str, Tuple[int, ...]]:
    d = self.embed_dim
    shapes: Dict[str, Tuple[int, ...]] = {
      prefix + "patch.weight": (self.patch_size * self.patch_size * 3, d),
      prefix + "patch.bias": (d,),
      prefix + "pos": (self.tokens, d),
    }
    for i in range(self.depth):
      shapes.update(block_shapes(f"{prefix}blocks.{i}.", d, self.mlp_ratio))
    return shapes


@dataclass(frozen=True)
class FeatureMap:
  grid_h: int
  grid_w: int
  channels: int
  data: np.ndarray  # (grid_h, grid_w, channels)

  def __post_init__(self) -> None:
    if self.data.shape != (self.grid_h, self.grid_w, self.channels):
      raise ConfigError(
        f"feature data shape {self.data.shape} does not match grid "
        f"{self.grid_h}x{self.grid_w}x{self.channels}"
      )
    if not np.all(np.isfinite(self.data)):
      raise DataError("feature map contains non-finite entries")

  @staticmethod
  def from_tokens(tokens: np.ndarray, grid_h: int, grid_w: int) -> "FeatureMap":
    c = tokens.shape[-1]
    return FeatureMap(grid_h, grid_w, c, tokens.reshape(grid_h, grid_w, c))

  @property
  def tokens(self) -> np.ndarray:
    return self.data.reshape(self.grid_h * self.grid_w, self.channels)


# ---------------------------------------------------------------------------
# Weight archive
# ---------------------------------------------------------------------------

@dataclass
class WeightArchive:
  tensors: Dict[str, np.ndarray] = field(default_factory=dict)
  version: int = ARCHIVE_VERSION

  def __post_init__(self) -> None:
    self.tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.tensors.items()}

  def __contains__(self, name: str) -> bool:
    return name in self.tensors

  def __getitem__(self, name: str) -> np.ndarray:
    return self.tensors[name]

  @property
  def names(self) -> List[str]:
    return sorted(self.tensors)

  def subset(self, prefix: str) -> "WeightArchive":
    return WeightArchive({k: v for k, v in self.tensors.items() if k.startswith(prefix)})

  def merged(self, other: "WeightArchive") -> "WeightArchive":
    tensors = dict(self.tensors)
    tensors.update(other.tensors)
    return WeightArchive(tensors)

  def copy(self) -> "WeightArchive":
    return WeightArchive({k: v.copy() for k, v in self.tensors.items()})

  def validate_against(self, shapes: Mapping[str, Sequence[int]]) -> "WeightArchive":
    for name in sorted(shapes):
      if name not in self.tensors:
        raise WeightArchiveError(f"weight archive is missing tensor {name}", name)
      got, want = tuple(self.tensors[name].shape), tuple(shapes[name])
      if got != want:
        raise WeightArchiveError(f"tensor {name} has shape {got}, expected {want}", name)
    return self

  def equals(self, other: "WeightArchive") -> bool:
    if self.names != other.names:
      return False
    return all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.names)

  def to_bytes(self) -> bytes:
    chunks = [ARCHIVE_MAGIC]
    for name in self.names:
      arr = self.tensors[name]
      raw = name.encode("utf-8")
      chunks.append(struct.pack("<I", len(raw)))
      chunks.append(raw)
      chunks.append(struct.pack("<I", arr.ndim))
      chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
      chunks.append(arr.astype("<f4").tobytes(order="C"))
    return b"".join(chunks)

  @staticmethod
  def from_bytes(data: bytes, source: str = "<bytes>") -> "WeightArchive":
    if not data.startswith(ARCHIVE_MAGIC):
      raise WeightArchiveError(f"{source}: not a weight archive (bad magic)")
    view = memoryview(data)
    pos = len(ARCHIVE_MAGIC)
    tensors: Dict[str, np.ndarray] = {}

    def take(n: int) -> memoryview:
      nonlocal pos
      if pos + n > len(view):
        raise WeightArchiveError(f"{source}: truncated archive at byte {pos}")
      chunk = view[pos:pos + n]
      pos += n
      return chunk

    while pos < len(view):
      (name_len,) = struct.unpack("<I", take(4))
      name = bytes(take(name_len)).decode("utf-8")
      (rank,) = struct.unpack("<I", take(4))
      dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
      count = int(np.prod(dims)) if dims else 1
      arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
      if name in tensors:
        raise WeightArchiveError(f"{source}: duplicate tensor {name}", name)
      tensors[name] = arr.astype(np.float32)
    return WeightArchive(tensors)

  def save(self, path: Union[str, Path]) -> Path:
    return atomic_write_bytes(path, self.to_bytes())

  @staticmethod
  def load(path: Union[str, Path]) -> "WeightArchive":
    p = Path(path)
    if not p.is_file():
      raise WeightArchiveError(f"weight archive not found: {p}")
    return WeightArchive.from_bytes(p.read_bytes(), str(p))


def load_weights(
  path: Union[str, Path],
  config: Optional[EncoderConfig] = None,
  prefix: str = TEACHER_PREFIX,
) -> WeightArchive:
  archive = WeightArchive.load(path)
  if config is not None:
    archive.validate_against(config.tensor_shapes(prefix))
  return archive


def init_tensors(shapes: Mapping[str, Tuple[int, ...]], seed: int) -> WeightArchive:
  """Truncated normal (std 0.02, cut at 2 std) for matrices and positional
  embeddings, zeros for biases and layer-norm shifts, ones for layer-norm scales."""
  rng = np.random.default_rng(seed)
  tensors: Dict[str, np.ndarray] = {}
  for name in sorted(shapes):
    shape = shapes[name]
    if name.endswith(".gamma"):
      tensors[name] = np.ones(shape, dtype=np.float32)
    elif name.endswith(".bias") or name.endswith(".beta"):
      tensors[name] = np.zeros(shape, dtype=np.float32)
    else:
      values = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng)
      tensors[name] = np.asarray(values, dtype=np.float32)
  return WeightArchive(tensors)


def init_weights(config: EncoderConfig, seed: int, prefix: str = TEACHER_PREFIX) -> WeightArchive:
  return init_tensors(config.validate().tensor_shapes(prefix), seed)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _check_images(images: np.ndarray, config: EncoderConfig) -> None:
  s = config.image_size
  if images.ndim < 3 or images.shape[-3:] != (s, s, 3):
    raise ConfigError(f"expected image(s) of shape (..., {s}, {s}, 3), got {images.shape}")


def patch_embed(image: np.ndarray, params: Mapping[str, np.ndarray], config: EncoderConfig,
                prefix: str = TEACHER_PREFIX) -> np.ndarray:
  """(h, w, 3) image -> (grid, grid, embed_dim) token grid."""
  _check_images(image, config)
  tokens, _ = patch_embed_forward(image, params, prefix, config.patch_size)
  return tokens.reshape(image.shape[:-3] + (config.grid, config.grid, config.embed_dim))


def encode_tokens(
  images: np.ndarray,
  config: EncoderConfig,
  weights: Mapping[str, np.ndarray],
  prefix: str = TEACHER_PREFIX,
) -> List[np.ndarray]:
  """Batched forward: (..., h, w, 3) -> list of j arrays shaped (..., T, D)."""
  _check_images(images, config)
  x, _ = patch_embed_forward(images, weights, prefix, config.patch_size)
  taps = set(config.tap_layers)
  out: List[np.ndarray] = []
  for i in range(config.depth):
    x, _ = block_forward(x, weights, f"{prefix}blocks.{i}.", config.heads, "softmax")
    if i in taps:
      out.append(x)
  return out


def encoder_forward(
  image: np.ndarray,
  config: EncoderConfig,
  weights: Union[WeightArchive, Mapping[str, np.ndarray]],
  prefix: str = TEACHER_PREFIX,
) -> List[FeatureMap]:
  params = weights.tensors if isinstance(weights, WeightArchive) else weights
  for name, shape in config.tensor_shapes(prefix).items():
    if name not in params or tuple(params[name].shape) != tuple(shape):
      raise ConfigError(f"weights do not match the encoder config at tensor {name}")
  g = config.grid
  return [FeatureMap.from_tokens(t, g, g) for t in encode_tokens(image, config, params, prefix)]

