from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Union

from .errors import DataError, InputError

PathLike = Union[str, Path]


def ensure_parent(path: Path) -> None:
  path.parent.mkdir(parents=True, exist_ok=True)


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
  p = Path(path)
  ensure_parent(p)
  tmp = p.with_suffix(p.suffix + ".tmp")
  try:
    tmp.write_bytes(data)
    tmp.replace(p)
  except OSError as exc:
    raise InputError(f"Cannot write {p}: {exc}") from exc
  return p


def atomic_write_text(path: PathLike, text: str) -> Path:
  return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: PathLike, payload: Any) -> Path:
  return atomic_write_text(path, json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Any:
  p = Path(path)
  if not p.exists() or not p.is_file():
    raise InputError(f"File not found: {p}")
  try:
    return json.loads(p.read_text(encoding="utf-8"))
  except json.JSONDecodeError as exc:
    raise DataError(f"Invalid JSON in {p}: {exc}") from exc


def sha256_bytes(data: bytes) -> str:
  return hashlib.sha256(data).hexdigest()


def prepare_output_dir(path: PathLike, force: bool = False) -> Path:
  """Create `path`, refusing to reuse a non-empty directory unless forced."""
  p = Path(path)
  if p.exists():
    if not p.is_dir():
      raise InputError(f"Output path exists and is not a directory: {p}")
    if any(p.iterdir()) and not force:
      raise InputError(f"Output directory {p} is not empty; pass --force to overwrite")
  p.mkdir(parents=True, exist_ok=True)
  return p
