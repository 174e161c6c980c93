"""Forward tape and reverse-pass driver for the student network.

Forward code appends ``(op, cache)`` records to a :class:`GradTape` in
execution order. :func:`backward_pass` replays them in reverse, handing the
gradient produced by one record to the next. The value carried between
records is whatever the op's input was (an array, or a list of arrays for
ops that fan in).
"""

from __future__ import annotations

from typing import Any, Callable, Dict, List, Tuple

from .errors import LogicError
from .layers import Grads, accumulate

BackwardFn = Callable[[Any, Any], Tuple[Any, Grads]]

_BACKWARD: Dict[str, BackwardFn] = {}


def register_backward(op: str) -> Callable[[BackwardFn], BackwardFn]:
  def deco(fn: BackwardFn) -> BackwardFn:
    if op in _BACKWARD:
      raise LogicError(f"backward for {op!r} registered twice")
    _BACKWARD[op] = fn
    return fn

  return deco


def registered_ops() -> List[str]:
  return sorted(_BACKWARD)


class GradTape:
  def __init__(self) -> None:
    self._records: List[Tuple[str, Any]] = []
    self._consumed = False

  def record(self, op: str, cache: Any) -> None:
    if self._consumed:
      raise LogicError("cannot record on a tape that was already consumed")
    if op not in _BACKWARD:
      raise LogicError(f"no backward registered for op {op!r}")
    self._records.append((op, cache))

  @property
  def ops(self) -> List[str]:
    return [op for op, _ in self._records]

  @property
  def consumed(self) -> bool:
    return self._consumed

  def __len__(self) -> int:
    return len(self._records)

  def consume(self) -> List[Tuple[str, Any]]:
    if self._consumed:
      raise LogicError("tape already consumed; run a fresh forward before backward")
    self._consumed = True
    records = list(reversed(self._records))
    self._records = []
    return records


def backward_pass(tape: GradTape, upstream: Any) -> Tuple[Grads, Any]:
  """Return (parameter gradients, gradient w.r.t. the first recorded input)."""
  grads: Grads = {}
  g = upstream
  for op, cache in tape.consume():
    g, op_grads = _BACKWARD[op](g, cache)
    accumulate(grads, op_grads)
  return grads, g
