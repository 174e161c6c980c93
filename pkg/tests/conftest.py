"""Test configuration for pytest.

Puts the repository root (for `import mvr`) and this directory (for the
shared `gradcheck` helpers) on sys.path.
"""

import os
import sys


def _ensure_on_path() -> None:
  here = os.path.abspath(os.path.dirname(__file__))
  repo_root = os.path.abspath(os.path.join(here, os.pardir))
  for path in (repo_root, here):
    if path not in sys.path:
      sys.path.insert(0, path)


_ensure_on_path()
