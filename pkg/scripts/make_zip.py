"""Bundle sources, docs and tests into dist/mvr-project.zip.

Run artifacts (weight archives, rendered views, PLY outputs) are left out.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import List
from zipfile import ZIP_DEFLATED, ZipFile

PROJECT_FILES = ["pyproject.toml", "README.md", "README.build.md", "CHANGELOG.md", "DESIGN.md"]
INCLUDE_DIRS = ["mvr", "docs", "tests", "scripts"]
SKIP_SUFFIXES = {".pyc", ".mvrw", ".ply", ".png", ".f32", ".bin", ".tmp"}
SKIP_PARTS = {"__pycache__", ".venv", "dist", ".pytest_cache"}


def collect_files(root: Path) -> List[Path]:
  files = [root / f for f in PROJECT_FILES if (root / f).is_file()]
  for d in INCLUDE_DIRS:
    for path in sorted((root / d).rglob("*")):
      if not path.is_file() or path.suffix in SKIP_SUFFIXES:
        continue
      if SKIP_PARTS & set(path.relative_to(root).parts):
        continue
      files.append(path)
  return files


def main(argv: List[str]) -> int:
  root = Path(argv[0] if argv else ".").resolve()
  zip_path = root / "dist" / "mvr-project.zip"
  zip_path.parent.mkdir(exist_ok=True)
  with ZipFile(zip_path, "w", ZIP_DEFLATED) as z:
    for f in collect_files(root):
      z.write(f, f.relative_to(root))
  print(zip_path)
  return 0


if __name__ == "__main__":
  raise SystemExit(main(sys.argv[1:]))
