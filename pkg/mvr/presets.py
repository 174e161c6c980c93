from __future__ import annotations

"""
Encoder scale presets.

Small/base/large backbones at sizes that train on a CPU. A preset only
touches the encoder shape; every other field keeps its configured value.
"""

from dataclasses import dataclass
from typing import Any, Dict, List

from .errors import ConfigError


@dataclass(frozen=True)
class EncoderPreset:
  name: str
  embed_dim: int
  encoder_depth: int
  heads: int
  mlp_ratio: int = 4

  def overrides(self) -> Dict[str, Any]:
    return {
      "embed_dim": self.embed_dim,
      "encoder_depth": self.encoder_depth,
      "heads": self.heads,
      "mlp_ratio": self.mlp_ratio,
    }


class PresetRegistry:
  def __init__(self) -> None:
    self._presets: Dict[str, EncoderPreset] = {}

  def register(self, preset: EncoderPreset) -> None:
    if not preset.name:
      raise ConfigError("preset name must be non-empty")
    if preset.embed_dim % preset.heads:
      raise ConfigError(f"preset {preset.name}: embed_dim {preset.embed_dim} is not divisible by {preset.heads} heads")
    self._presets[preset.name] = preset

  def get(self, name: str) -> Dict[str, Any]:
    """Config overrides for ``name``."""
    try:
      return self._presets[name].overrides()
    except KeyError:
      raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(self.names())}") from None

  def names(self) -> List[str]:
    return sorted(self._presets)


presets = PresetRegistry()
presets.register(EncoderPreset("desk-s", embed_dim=96, encoder_depth=4, heads=3))
presets.register(EncoderPreset("desk-b", embed_dim=128, encoder_depth=6, heads=4))
presets.register(EncoderPreset("desk-l", embed_dim=192, encoder_depth=12, heads=6))
