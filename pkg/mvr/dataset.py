"""Synthetic train/test splits on disk.

Layout::

  <root>/manifest.json
  <root>/train/<name>.ply
  <root>/test/<name>.ply

Each PLY carries a per-point ``label`` property. The manifest lists every
cloud with its split, category and whether it is anomalous.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from .config import RunConfig, config_hash
from .errors import ConfigError, DataError
from .io_utils import atomic_write_json, read_json
from .pointcloud import AnomalySpec, DatasetSplit, PointCloud, load_ply, make_synthetic, save_ply

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
_SPLIT_CODES = {"train": 0, "good": 1, "anomalous": 2}


def cloud_seed(seed: int, kind_index: int, split: str, index: int) -> int:
  ss = np.random.SeedSequence([seed, kind_index, _SPLIT_CODES[split], index])
  return int(ss.generate_state(1)[0])


def synthesize(config: RunConfig) -> DatasetSplit:
  """Normal training clouds plus normal and anomalous test clouds per kind."""
  spec = AnomalySpec(config.anomaly, config.anomaly_radius, config.anomaly_depth)
  train: List[PointCloud] = []
  test: List[Tuple[PointCloud, int]] = []
  for k, kind in enumerate(config.kinds):
    for i in range(config.n_train):
      train.append(make_synthetic(kind, config.n_points, None, cloud_seed(config.seed, k, "train", i),
                                  name=f"{kind}_train_{i:03d}"))
    for i in range(config.n_test_normal):
      test.append((make_synthetic(kind, config.n_points, None, cloud_seed(config.seed, k, "good", i),
                                 name=f"{kind}_good_{i:03d}"), 0))
    for i in range(config.n_test_anomalous):
      cloud = make_synthetic(kind, config.n_points, spec, cloud_seed(config.seed, k, "anomalous", i),
                             name=f"{kind}_{config.anomaly}_{i:03d}")
      if cloud.anomalous_points == 0:
        raise ConfigError(
          f"{cloud.name} is meant to be anomalous but has no labeled points; "
          f"increase --anomaly-depth (now {config.anomaly_depth}) or --anomaly-radius"
        )
      test.append((cloud, 1))
  return DatasetSplit(train, test)


def write_dataset(split: DatasetSplit, root: Union[str, Path], config: RunConfig) -> Path:
  root = Path(root)
  entries: List[Dict[str, Any]] = []
  rows = [(c, "train", 0) for c in split.train] + [(c, "test", y) for c, y in split.test]
  for cloud, name_split, label in rows:
    rel = f"{name_split}/{cloud.name}.ply"
    save_ply(cloud, root / rel)
    entries.append({
      "name": cloud.name,
      "split": name_split,
      "category": cloud.category,
      "anomalous": bool(label),
      "labeled_points": cloud.anomalous_points,
      "n_points": cloud.n,
      "seed": cloud.seed,
      "file": rel,
    })
  manifest = {
    "version": MANIFEST_VERSION,
    "seed": config.seed,
    "anomaly": {"kind": config.anomaly, "radius": config.anomaly_radius, "depth": config.anomaly_depth},
    "config_hash": config_hash(config),
    "clouds": entries,
  }
  return atomic_write_json(root / MANIFEST, manifest)


def load_dataset(root: Union[str, Path]) -> DatasetSplit:
  root = Path(root)
  manifest = read_json(root / MANIFEST)
  if not isinstance(manifest, dict) or not isinstance(manifest.get("clouds"), list):
    raise DataError(f"{root / MANIFEST}: expected an object with a 'clouds' list")
  train: List[PointCloud] = []
  test: List[Tuple[PointCloud, int]] = []
  for entry in manifest["clouds"]:
    try:
      name, which, rel = entry["name"], entry["split"], entry["file"]
    except (KeyError, TypeError) as exc:
      raise DataError(f"malformed manifest entry: {entry!r}") from exc
    raw = load_ply(root / rel)
    seed = entry.get("seed")
    cloud = PointCloud(raw.points, raw.labels, name=name, category=str(entry.get("category", "")),
                       seed=None if seed is None else int(seed))
    anomalous = bool(entry.get("anomalous", False))
    if anomalous != (cloud.anomalous_points > 0):
      raise DataError(
        f"{name}: manifest marks it {'anomalous' if anomalous else 'normal'} but it has "
        f"{cloud.anomalous_points} labeled points"
      )
    if which == "train":
      train.append(cloud)
    elif which == "test":
      test.append((cloud, int(anomalous)))
    else:
      raise DataError(f"{name}: unknown split {which!r}")
  return DatasetSplit(train, test)


def is_dataset(path: Union[str, Path]) -> bool:
  return (Path(path) / MANIFEST).is_file()
