from __future__ import annotations

from typing import Optional


class MvrError(Exception):
  """Base exception for the mvr pipeline."""

  exit_code = 2


class ConfigError(MvrError):
  """Invalid configuration, parameters or command usage."""

  exit_code = 1


class InputError(MvrError):
  """Invalid input provided by user."""

  exit_code = 1


class DataError(MvrError):
  """Malformed or inconsistent data on disk or in memory."""

  exit_code = 2


class PlyParseError(DataError):
  """Malformed PLY header."""

  def __init__(self, message: str, line: Optional[int] = None) -> None:
    self.line = line
    where = f" (line {line})" if line is not None else ""
    super().__init__(f"{message}{where}")


class WeightArchiveError(DataError):
  """Missing or mismatched tensor in a weight archive."""

  def __init__(self, message: str, name: Optional[str] = None) -> None:
    self.name = name
    super().__init__(message)


class NumericError(MvrError):
  """Non-finite values or divergence during numerical work."""

  exit_code = 3

  def __init__(self, message: str, step: Optional[int] = None) -> None:
    self.step = step
    where = f" at step {step}" if step is not None else ""
    super().__init__(f"{message}{where}")


class LogicError(MvrError):
  """A call violated a programming contract (tape reuse, bad domain)."""

  exit_code = 3
