from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path
from textwrap import dedent
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .backbone import TEACHER_PREFIX, WeightArchive
from .bundle import prepare_views, write_heatmaps
from .config import RunConfig, apply_overrides, load_config, worker_count
from .dataset import is_dataset, load_dataset, synthesize, write_dataset
from .errors import ConfigError, InputError, MvrError
from .evaluation import evaluate, write_ablation_csv, write_report
from .fusion import AnomalyResult
from .io_utils import atomic_write_json, prepare_output_dir, read_json
from .log import logger
from .pipeline import MVRPipeline, safe_name
from .pointcloud import DatasetSplit, PointCloud, load_ply, save_ply_colored
from .presets import presets
from .projection import interior_empty_fraction
from .reconstruction import STUDENT_PREFIX
from .training import train

ABLATION_AXES = {
  "resolution": "render_resolution",
  "views": "n_views",
  "depth": "encoder_depth",
}


class SmartFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
  pass


class ArgumentParser(argparse.ArgumentParser):
  """Usage errors exit with status 1."""

  def error(self, message: str) -> None:  # type: ignore[override]
    self.print_usage(sys.stderr)
    self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(payload: Dict[str, Any]) -> None:
  print(json.dumps(payload, indent=2))


def _config_parent() -> argparse.ArgumentParser:
  """Shared --config/--preset plus one --flag per RunConfig field."""
  p = ArgumentParser(add_help=False)
  p.add_argument("--config", "-c", help="JSON (or YAML with PyYAML) config file")
  p.add_argument("--preset", choices=presets.names(), help="Encoder scale preset")
  group = p.add_argument_group("config overrides (win over --config and --preset)")
  defaults = RunConfig()
  for f in fields(RunConfig):
    flag = "--" + f.name.replace("_", "-")
    default = getattr(defaults, f.name)
    shown = ",".join(str(x) for x in default) if isinstance(default, list) else default
    group.add_argument(flag, dest=f"cfg_{f.name}", default=argparse.SUPPRESS, metavar="V",
                       help=f"{f.name} (default: {shown})")
  return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
  overrides: Dict[str, Any] = {}
  if getattr(args, "preset", None):
    overrides.update(presets.get(args.preset))
  for key, value in vars(args).items():
    if key.startswith("cfg_"):
      overrides[key[4:]] = value
  return load_config(getattr(args, "config", None), overrides)


def _load_split(path: str) -> DatasetSplit:
  if not is_dataset(path):
    raise InputError(f"{path} is not a dataset directory (no manifest.json); run 'mvr synth' first")
  return load_dataset(path)


def _split_archive(path: str, config: RunConfig) -> Tuple[WeightArchive, WeightArchive]:
  archive = WeightArchive.load(path)
  teacher = archive.subset(TEACHER_PREFIX).validate_against(config.encoder_config().tensor_shapes())
  student = archive.subset(STUDENT_PREFIX).validate_against(config.decoder_config().student_shapes())
  return teacher, student


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
  split = synthesize(config)
  out = prepare_output_dir(args.out, args.force)
  manifest = write_dataset(split, out, config)
  _emit({
    "dataset": str(out),
    "manifest": str(manifest),
    "train": len(split.train),
    "test_normal": sum(1 for _, y in split.test if y == 0),
    "test_anomalous": sum(1 for _, y in split.test if y == 1),
  })
  return 0


def cmd_render(args: argparse.Namespace, config: RunConfig) -> int:
  split = _load_split(args.data)
  root = Path(args.out)
  workers = worker_count(config)
  written = skipped = 0
  clouds: List[PointCloud] = list(split.train) + [c for c, _ in split.test]
  for cloud in clouds:
    _, wrote = prepare_views(cloud, config, root / safe_name(cloud.name), workers)
    written += int(wrote)
    skipped += int(not wrote)
  _emit({"views": str(root), "written": written, "skipped": skipped})
  return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
  split = _load_split(args.data)
  out = prepare_output_dir(args.out, args.force)
  result = train(split, config, out_dir=out, cache_root=args.views, workers=worker_count(config))
  head = result.losses[:10]
  tail = result.losses[-10:]
  _emit({
    "final": str(result.final_path),
    "log": str(result.log_path),
    "steps": len(result.losses),
    "initial_loss": float(np.mean(head)) if head else None,
    "final_loss": float(np.mean(tail)) if tail else None,
  })
  return 0


def score_clouds(
  clouds: List[PointCloud],
  config: RunConfig,
  teacher: WeightArchive,
  student: WeightArchive,
  views: Optional[str] = None,
  heatmap_dir: Optional[Path] = None,
) -> Tuple[List[AnomalyResult], Dict[str, Any]]:
  pipeline = MVRPipeline(config, teacher, student, worker_count(config), views)
  context: Dict[str, Any] = {"empty_fractions": []}
  results: List[AnomalyResult] = []
  for cloud in clouds:
    features = pipeline.prepare(cloud, context)
    result = pipeline.score(features, context)
    bundle = features.bundle
    if bundle is not None:
      if heatmap_dir is not None:
        write_heatmaps(bundle, result.point_scores, heatmap_dir / safe_name(cloud.name))
      context["empty_fractions"].extend(
        interior_empty_fraction(img) for img in bundle.images(config.input_resolution)
      )
    features.release_bundle()
    results.append(result)
    logger.debug("scored", cloud.name, object_score=float(result.object_score), invisible=result.invisible_count)
  return results, context


def cmd_infer(args: argparse.Namespace, config: RunConfig) -> int:
  teacher, student = _split_archive(args.weights, config)
  source = Path(args.input)
  if is_dataset(source):
    clouds = [c for c, _ in load_dataset(source).test]
  elif source.is_file():
    clouds = [load_ply(source)]
  else:
    raise InputError(f"input not found: {source}")
  out = Path(args.out)
  out.mkdir(parents=True, exist_ok=True)
  heatmaps = out / "heatmaps" if args.heatmaps else None
  results, _ = score_clouds(clouds, config, teacher, student, args.views, heatmaps)
  payload = {"results": [r.to_json(c.name) for c, r in zip(clouds, results)]}
  scores_path = atomic_write_json(out / "scores.json", payload)
  if args.ply:
    for cloud, r in zip(clouds, results):
      save_ply_colored(cloud, r.point_scores, out / "ply" / f"{safe_name(cloud.name)}.ply")
  _emit({
    "scores": str(scores_path),
    "clouds": len(results),
    "object_scores": {c.name: float(r.object_score) for c, r in zip(clouds, results)},
  })
  return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
  split = _load_split(args.data)
  data = read_json(args.scores)
  if not isinstance(data, dict) or not isinstance(data.get("results"), list):
    raise InputError(f"{args.scores}: expected an object with a 'results' list")
  results = {str(r.get("name", "")): AnomalyResult.from_json(r) for r in data["results"]}
  report = evaluate(results, split, config)
  out = Path(args.out) if args.out else Path(args.scores).with_name("report.json")
  write_report(report, out)
  _emit({"report": str(out), "o_roc": report.o_roc, "p_roc": report.p_roc, "categories": report.categories})
  return 0


def _parse_values(axis: str, raw: str) -> List[int]:
  try:
    values = [int(v) for v in raw.split(",") if v.strip()]
  except ValueError as exc:
    raise ConfigError(f"--values must be comma-separated integers for axis {axis}") from exc
  if not values:
    raise ConfigError("--values is empty")
  return values


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
  field_name = ABLATION_AXES[args.axis]
  values = _parse_values(args.axis, args.values)
  retrain = bool(args.retrain) or args.axis == "depth"
  if retrain and args.weights:
    why = "--retrain" if args.retrain else "--axis depth changes the encoder shape"
    raise ConfigError(f"--weights cannot be reused: {why} retrains for every value")
  split = _load_split(args.data)
  root = prepare_output_dir(args.out, args.force)
  shared: Optional[Tuple[WeightArchive, WeightArchive]] = None
  shared_loss: Optional[float] = None
  if not retrain:
    if args.weights:
      shared = _split_archive(args.weights, config)
    else:
      trained = train(split, config, out_dir=root / "train", workers=worker_count(config))
      shared = (trained.teacher, trained.student)
      shared_loss = float(np.mean(trained.losses[-10:])) if trained.losses else None
  rows: List[Dict[str, Any]] = []
  for value in values:
    t0 = time.perf_counter()
    cfg = apply_overrides(config, {field_name: value}).validate()
    run_dir = root / f"{args.axis}_{value}"
    if shared is None:
      trained = train(split, cfg, out_dir=run_dir / "train", workers=worker_count(cfg))
      teacher, student = trained.teacher, trained.student
      final_loss = float(np.mean(trained.losses[-10:])) if trained.losses else None
    else:
      teacher, student = shared
      final_loss = shared_loss
    clouds = [c for c, _ in split.test]
    results, context = score_clouds(clouds, cfg, teacher, student, str(run_dir / "views"))
    report = evaluate(results, split, cfg)
    write_report(report, run_dir / "report.json")
    fractions = context.get("empty_fractions", [])
    rows.append({
      "axis": args.axis,
      "value": value,
      "o_roc": report.o_roc,
      "p_roc": report.p_roc,
      "interior_empty_fraction": float(np.mean(fractions)) if fractions else None,
      "mean_invisible": float(np.mean([r.invisible_count for r in results])) if results else None,
      "final_loss": final_loss,
      "wall_s": time.perf_counter() - t0,
    })
    logger.debug("ablation", axis=args.axis, value=value, o_roc=rows[-1]["o_roc"], p_roc=rows[-1]["p_roc"])
  csv_path = write_ablation_csv(rows, root / "report.csv")
  _emit({"report": str(csv_path), "rows": [{k: r[k] for k in ("value", "o_roc", "p_roc")} for r in rows]})
  return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
  p = ArgumentParser(
    prog="mvr",
    description="Multi-view reconstruction anomaly detection for point clouds.",
    formatter_class=SmartFormatter,
    epilog=dedent(
      """
      Examples:
        mvr synth --out data --seed 7
        mvr render --data data --out views
        mvr train --data data --out run --views views --iterations 300
        mvr infer --weights run/final.mvrw --input data --out scores --views views --heatmaps
        mvr eval --scores scores/scores.json --data data
        mvr ablate --axis views --values 1,3,6 --data data --out sweep --weights run/final.mvrw
      """
    ),
  )
  p.add_argument("--debug", "-d", action="store_true", help="Enable debug logging")
  p.add_argument("--version", action="version", version=f"mvr {__version__}")
  parent = _config_parent()
  sub = p.add_subparsers(dest="cmd", required=True)

  syn = sub.add_parser("synth", parents=[parent], help="Write a synthetic train/test dataset",
                       formatter_class=SmartFormatter)
  syn.add_argument("--out", "-o", required=True, help="Dataset directory")
  syn.add_argument("--force", action="store_true", help="Overwrite a non-empty output directory")

  ren = sub.add_parser("render", parents=[parent], help="Render view bundles for every cloud",
                       formatter_class=SmartFormatter)
  ren.add_argument("--data", required=True, help="Dataset directory")
  ren.add_argument("--out", "-o", required=True, help="View-bundle root directory")

  trn = sub.add_parser("train", parents=[parent], help="Train the student on the normal split",
                       formatter_class=SmartFormatter)
  trn.add_argument("--data", required=True, help="Dataset directory")
  trn.add_argument("--out", "-o", required=True, help="Run directory for final.mvrw and train_log.csv")
  trn.add_argument("--views", help="View-bundle cache root (reused when up to date)")
  trn.add_argument("--force", action="store_true", help="Overwrite a non-empty run directory")

  inf = sub.add_parser("infer", parents=[parent], help="Score a PLY file or a dataset's test split",
                       formatter_class=SmartFormatter)
  inf.add_argument("--weights", "-w", required=True, help="Checkpoint holding teacher and student")
  inf.add_argument("--input", "-i", required=True, help="PLY file or dataset directory")
  inf.add_argument("--out", "-o", required=True, help="Output directory for scores.json")
  inf.add_argument("--views", help="View-bundle cache root")
  inf.add_argument("--ply", action="store_true", help="Also write score-colored PLY files")
  inf.add_argument("--heatmaps", action="store_true", help="Also write per-view heatmap PNGs")

  ev = sub.add_parser("eval", parents=[parent], help="Compute O-ROC and P-ROC from scores.json",
                      formatter_class=SmartFormatter)
  ev.add_argument("--scores", required=True, help="scores.json from 'mvr infer'")
  ev.add_argument("--data", required=True, help="Dataset directory with labels")
  ev.add_argument("--out", "-o", help="report.json path (default: next to scores.json)")

  ab = sub.add_parser("ablate", parents=[parent], help="Sweep resolution, view count or encoder depth",
                      formatter_class=SmartFormatter)
  ab.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES), help="Sweep axis")
  ab.add_argument("--values", required=True, help="Comma-separated values, e.g. 1,3,6")
  ab.add_argument("--data", required=True, help="Dataset directory")
  ab.add_argument("--out", "-o", required=True, help="Sweep directory for report.csv")
  ab.add_argument("--weights", "-w", help="Reuse this checkpoint instead of training once")
  ab.add_argument("--retrain", action="store_true", help="Retrain the student for every value")
  ab.add_argument("--force", action="store_true", help="Overwrite a non-empty sweep directory")
  return p


COMMANDS = {
  "synth": cmd_synth,
  "render": cmd_render,
  "train": cmd_train,
  "infer": cmd_infer,
  "eval": cmd_eval,
  "ablate": cmd_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
  parser = build_parser()
  args = parser.parse_args(argv)
  try:
    logger.set_enabled(bool(args.debug))
    config = resolve_config(args)
    return COMMANDS[args.cmd](args, config)
  except MvrError as exc:
    print(f"error: {exc}", file=sys.stderr)
    return exc.exit_code
  except BrokenPipeError:
    return 0


if __name__ == "__main__":  # pragma: no cover
  raise SystemExit(main())
