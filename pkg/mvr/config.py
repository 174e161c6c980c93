from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from .errors import ConfigError

FUSION_MODES = ("visible", "all")
LOSS_MODES = ("fused", "per_view")
SHAPE_KINDS = ("sphere", "box", "cylinder")
ANOMALY_KINDS = ("dent", "bulge")


def default_taps(depth: int) -> List[int]:
  """Contiguous middle half of an encoder: layers depth/4 .. 3*depth/4."""
  return list(range(depth // 4, -(-3 * depth // 4)))


@dataclass
class RunConfig:
  # rendering
  render_resolution: int = 672
  input_resolution: int = 224
  n_views: int = 27
  camera_radius: float = 3.0
  focal_length: float = 500.0  # pixels at 672; scaled with resolution
  fusion_mode: str = "visible"
  # model
  patch_size: int = 14
  embed_dim: int = 128
  encoder_depth: int = 6
  heads: int = 4
  mlp_ratio: int = 4
  taps: List[int] = field(default_factory=list)  # empty -> middle half
  teacher_weights: str = ""
  # loss / optimizer
  k_pct: float = 0.9
  shrink_factor: float = 0.1
  loss_mode: str = "fused"
  lr: float = 2e-4
  weight_decay: float = 1e-5
  beta1: float = 0.9
  beta2: float = 0.999
  eps: float = 1e-8
  amsgrad: bool = True
  update_clip: float = 1.0
  iterations: int = 300
  batch_size: int = 2
  checkpoint_every: int = 0
  # data
  seed: int = 0
  kinds: List[str] = field(default_factory=lambda: ["sphere"])
  n_points: int = 8192
  n_train: int = 20
  n_test_normal: int = 10
  n_test_anomalous: int = 10
  anomaly: str = "dent"
  anomaly_radius: float = 0.2
  anomaly_depth: float = 0.1
  # runtime
  threads: int = 0

  @property
  def tap_layers(self) -> List[int]:
    return list(self.taps) if self.taps else default_taps(self.encoder_depth)

  @property
  def downsample_factor(self) -> int:
    return self.render_resolution // self.input_resolution

  def encoder_config(self):
    from .backbone import EncoderConfig

    return EncoderConfig(
      image_size=self.input_resolution,
      patch_size=self.patch_size,
      embed_dim=self.embed_dim,
      depth=self.encoder_depth,
      heads=self.heads,
      tap_layers=self.tap_layers,
      mlp_ratio=self.mlp_ratio,
    )

  def decoder_config(self):
    from .reconstruction import DecoderConfig

    return DecoderConfig.for_encoder(self.encoder_config())

  def loss_config(self):
    from .loss import LossConfig

    return LossConfig(k_pct=self.k_pct, shrink_factor=self.shrink_factor)

  def optimizer_config(self):
    from .optim import OptimizerConfig

    return OptimizerConfig(
      lr=self.lr,
      weight_decay=self.weight_decay,
      betas=(self.beta1, self.beta2),
      eps=self.eps,
      amsgrad=self.amsgrad,
      update_clip=self.update_clip,
    )

  def validate(self) -> "RunConfig":
    if self.input_resolution <= 0 or self.render_resolution <= 0:
      raise ConfigError("resolutions must be positive")
    if self.render_resolution % self.input_resolution != 0:
      raise ConfigError(
        f"render_resolution {self.render_resolution} is not a multiple of input_resolution "
        f"{self.input_resolution}; pick a multiple of {self.input_resolution}"
      )
    if self.n_views < 1:
      raise ConfigError("n_views must be >= 1")
    if self.camera_radius <= 1.0:
      raise ConfigError("camera_radius must exceed the unit object norm (> 1)")
    if self.focal_length <= 0:
      raise ConfigError("focal_length must be positive")
    if self.fusion_mode not in FUSION_MODES:
      raise ConfigError(f"fusion_mode must be one of {', '.join(FUSION_MODES)}")
    if self.loss_mode not in LOSS_MODES:
      raise ConfigError(f"loss_mode must be one of {', '.join(LOSS_MODES)}")
    if self.threads < 0:
      raise ConfigError("threads must be >= 0 (0 = automatic)")
    if self.iterations < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
      raise ConfigError("iterations >= 0, batch_size >= 1 and checkpoint_every >= 0 are required")
    if not self.kinds or any(k not in SHAPE_KINDS for k in self.kinds):
      raise ConfigError(f"kinds must be a non-empty subset of {', '.join(SHAPE_KINDS)}")
    if self.anomaly not in ANOMALY_KINDS:
      raise ConfigError(f"anomaly must be one of {', '.join(ANOMALY_KINDS)}")
    if self.n_points < 100:
      raise ConfigError("n_points must be >= 100")
    if min(self.n_train, self.n_test_normal, self.n_test_anomalous) < 0 or self.n_train < 1:
      raise ConfigError("sample counts must be non-negative and n_train >= 1")
    # sub-configs carry their own invariants
    self.encoder_config().validate()
    self.loss_config().validate()
    self.optimizer_config().validate()
    return self

  def to_json(self) -> Dict[str, Any]:
    return asdict(self)


def config_hash(config: RunConfig) -> str:
  blob = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
  return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def worker_count(config: Optional[RunConfig] = None) -> int:
  if config is not None and config.threads > 0:
    return config.threads
  env = os.getenv("MVR_THREADS")
  if env:
    try:
      n = int(env)
    except ValueError as exc:
      raise ConfigError(f"MVR_THREADS must be an integer, got {env!r}") from exc
    if n >= 1:
      return n
  return os.cpu_count() or 1


def _coerce(name: str, default: Any, raw: Any) -> Any:
  try:
    if isinstance(default, bool):
      if isinstance(raw, bool):
        return raw
      text = str(raw).strip().lower()
      if text in {"1", "true", "yes", "on"}:
        return True
      if text in {"0", "false", "no", "off"}:
        return False
      raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
      if isinstance(raw, float) and not raw.is_integer():
        raise ValueError(f"not an integer: {raw!r}")
      return int(raw)
    if isinstance(default, float):
      return float(raw)
    if isinstance(default, list):
      items = raw if isinstance(raw, list) else [s for s in str(raw).split(",") if s.strip()]
      if name == "taps":
        return [int(x) for x in items]
      return [str(x).strip() for x in items]
    return str(raw)
  except (TypeError, ValueError) as exc:
    raise ConfigError(f"Invalid value for {name}: {exc}") from exc


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
  known = {f.name: f for f in fields(RunConfig)}
  values = config.to_json()
  for key, raw in overrides.items():
    name = key.replace("-", "_")
    if name not in known:
      raise ConfigError(f"Unknown config key: {key}")
    values[name] = _coerce(name, getattr(RunConfig(), name), raw)
  return RunConfig(**values)


def load_config(path: Optional[str], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
  config = RunConfig()
  if path:
    p = Path(path)
    if not p.exists():
      raise ConfigError(f"Config file not found: {path}")
    try:
      if p.suffix.lower() in {".json"}:
        data = json.loads(p.read_text(encoding="utf-8"))
      elif p.suffix.lower() in {".yml", ".yaml"}:
        try:
          import yaml  # type: ignore
        except Exception as exc:  # pragma: no cover - optional dep
          raise ConfigError("YAML support requires PyYAML; install it or use JSON.") from exc
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
      else:
        raise ConfigError("Unsupported config file type. Use .json or .yml/.yaml")
    except json.JSONDecodeError as exc:
      raise ConfigError(f"Invalid JSON in config file: {exc}") from exc
    if not isinstance(data, dict):
      raise ConfigError("config root must be a mapping")
    config = apply_overrides(config, data)
  if overrides:
    config = apply_overrides(config, overrides)
  return config.validate()
