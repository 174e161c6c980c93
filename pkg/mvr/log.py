from __future__ import annotations

import os
import sys
import time
from contextlib import contextmanager
from typing import Any, Iterator

DEBUG_ENV = "MVR_DEBUG"


def _env_debug() -> bool:
  return os.getenv(DEBUG_ENV) == "1"


def fields(**values: Any) -> str:
  """``key=value`` pairs in call order; floats get six significant digits."""
  parts = []
  for key, value in values.items():
    parts.append(f"{key}={value:.6g}" if isinstance(value, float) else f"{key}={value}")
  return " ".join(parts)


class Logger:
  """Debug chatter to stderr, results to stdout."""

  def __init__(self, enabled: bool = False) -> None:
    self.enabled = enabled or _env_debug()

  def set_enabled(self, enabled: bool) -> None:
    # the env var cannot be switched off from the command line
    self.enabled = bool(enabled) or _env_debug()

  def debug(self, *args: Any, **kv: Any) -> None:
    if not self.enabled:
      return
    msg = " ".join(str(a) for a in args)
    if kv:
      msg = f"{msg} {fields(**kv)}" if msg else fields(**kv)
    print(f"[mvr:debug] {msg}", file=sys.stderr)

  def info(self, *args: Any) -> None:
    print(" ".join(str(a) for a in args))

  def warn(self, *args: Any) -> None:
    print("warning: " + " ".join(str(a) for a in args), file=sys.stderr)

  def error(self, *args: Any) -> None:
    print(" ".join(str(a) for a in args), file=sys.stderr)

  @contextmanager
  def timed(self, label: str, **kv: Any) -> Iterator[None]:
    """Debug-log the wall time of the enclosed block."""
    if not self.enabled:
      yield
      return
    start = time.perf_counter()
    try:
      yield
    finally:
      self.debug(label, wall_ms=(time.perf_counter() - start) * 1000.0, **kv)


logger = Logger()
