import csv
import tempfile
import unittest
from pathlib import Path

import numpy as np

from mvr.errors import DataError
from mvr.evaluation import (
  ABLATION_COLUMNS,
  auroc,
  evaluate,
  roc_curve,
  trapezoid_auroc,
  write_ablation_csv,
  write_report,
)
from mvr.fusion import AnomalyResult
from mvr.pointcloud import DatasetSplit, PointCloud


def pairwise_auroc(scores, labels):
  pos = [s for s, y in zip(scores, labels) if y]
  neg = [s for s, y in zip(scores, labels) if not y]
  total = 0.0
  for p in pos:
    for n in neg:
      total += 1.0 if p > n else 0.5 if p == n else 0.0
  return total / (len(pos) * len(neg))


class TestAuroc(unittest.TestCase):
  def test_known_values(self):
    self.assertAlmostEqual(auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]), 0.75)
    self.assertAlmostEqual(auroc([0.1, 0.2, 0.3], [0, 1, 1]), 1.0)
    self.assertAlmostEqual(auroc([0.3, 0.2, 0.1], [0, 1, 1]), 0.0)
    self.assertAlmostEqual(auroc([0.5, 0.5], [0, 1]), 0.5)

  def test_single_class_is_undefined(self):
    self.assertIsNone(auroc([0.1, 0.2], [1, 1]))
    self.assertIsNone(trapezoid_auroc([0.1, 0.2], [0, 0]))

  def test_matches_pairwise_count(self):
    rng = np.random.default_rng(0)
    scores = np.round(rng.uniform(0, 1, 1000), 2)
    labels = rng.integers(0, 2, 1000)
    self.assertAlmostEqual(auroc(scores, labels), pairwise_auroc(scores, labels), places=10)
    self.assertAlmostEqual(trapezoid_auroc(scores, labels), auroc(scores, labels), places=10)

  def test_small_instances_match_pairwise(self):
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(1000):
      n = int(rng.integers(2, 51))
      scores = rng.integers(0, 8, n) / 8.0
      labels = rng.integers(0, 2, n)
      expected = pairwise_auroc(scores, labels) if 0 < labels.sum() < n else None
      got = auroc(scores, labels)
      if expected is None:
        self.assertIsNone(got)
        continue
      self.assertAlmostEqual(got, expected, delta=1e-12)
      checked += 1
    self.assertGreater(checked, 900)

  def test_negated_scores_complement(self):
    rng = np.random.default_rng(1)
    scores = rng.standard_normal(200)
    labels = rng.integers(0, 2, 200)
    self.assertAlmostEqual(auroc(scores, labels) + auroc(-scores, labels), 1.0, places=12)

  def test_roc_curve_endpoints(self):
    fpr, tpr = roc_curve([0.9, 0.8, 0.8, 0.1], [1, 0, 1, 0])
    np.testing.assert_allclose(fpr, [0.0, 0.0, 0.5, 1.0])
    np.testing.assert_allclose(tpr, [0.0, 0.5, 1.0, 1.0])

  def test_invalid_inputs(self):
    with self.assertRaises(DataError):
      auroc([0.1, 0.2], [0, 1, 1])
    with self.assertRaises(DataError):
      auroc([0.1, np.nan], [0, 1])
    with self.assertRaises(DataError):
      auroc([0.1, 0.2], [0, 2])


def labeled_cloud(name, labels, category="sphere"):
  return PointCloud(np.zeros((len(labels), 3)), labels=labels, name=name, category=category)


class TestEvaluate(unittest.TestCase):
  def setUp(self):
    self.split = DatasetSplit(test=[
      (labeled_cloud("good", [0, 0, 0]), 0),
      (labeled_cloud("bad", [0, 1, 1]), 1),
      (labeled_cloud("box_good", [0, 0], "box"), 0),
    ])
    self.results = {
      "good": AnomalyResult(np.array([0.1, 0.2, 0.1]), 0.2, {"invisible_count": 1}),
      "bad": AnomalyResult(np.array([0.1, 0.9, 0.8]), 0.9),
      "box_good": AnomalyResult(np.array([0.3, 0.0]), 0.3),
    }

  def test_metrics_and_breakdown(self):
    report = evaluate(self.results, self.split)
    self.assertAlmostEqual(report.o_roc, 1.0)
    self.assertAlmostEqual(report.p_roc, 1.0)
    self.assertEqual(report.n_objects, 3)
    self.assertEqual(report.n_points, 8)
    self.assertAlmostEqual(report.categories["sphere"]["o_roc"], 1.0)
    self.assertIsNone(report.categories["box"]["o_roc"])
    self.assertEqual(report.samples[0]["invisible_count"], 1)
    self.assertEqual(report.samples[1]["labeled_points"], 2)

  def test_sequence_input_in_split_order(self):
    ordered = [self.results[c.name] for c, _ in self.split.test]
    self.assertEqual(evaluate(ordered, self.split).o_roc, evaluate(self.results, self.split).o_roc)

  def test_missing_or_mismatched_results(self):
    with self.assertRaises(DataError):
      evaluate({"good": self.results["good"]}, self.split)
    with self.assertRaises(DataError):
      evaluate(list(self.results.values())[:2], self.split)
    bad = dict(self.results)
    bad["bad"] = AnomalyResult(np.zeros(2), 0.0)
    with self.assertRaises(DataError):
      evaluate(bad, self.split)

  def test_writers(self):
    report = evaluate(self.results, self.split)
    with tempfile.TemporaryDirectory() as tmp:
      self.assertTrue(write_report(report, Path(tmp) / "report.json").is_file())
      path = write_ablation_csv(
        [{"axis": "views", "value": 3, "o_roc": 0.5, "p_roc": None, "wall_s": 1.25}],
        Path(tmp) / "report.csv",
      )
      rows = list(csv.reader(path.read_text().splitlines()))
      self.assertEqual(tuple(rows[0]), ABLATION_COLUMNS)
      self.assertEqual(rows[1][:4], ["views", "3", "0.500000", ""])
      self.assertEqual(rows[1][-1], "1.250000")


if __name__ == "__main__":  # pragma: no cover
  unittest.main()
