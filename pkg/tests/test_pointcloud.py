import tempfile
import unittest
from pathlib import Path

import numpy as np
from plyfile import PlyData

from mvr.errors import ConfigError, DataError, InputError, PlyParseError
from mvr.pointcloud import (
  AnomalySpec,
  DatasetSplit,
  PointCloud,
  coordinate_dtype,
  load_ply,
  make_synthetic,
  normalize,
  save_ply,
  save_ply_colored,
  scores_to_colors,
)


class TestPointCloud(unittest.TestCase):
  def test_rejects_bad_points(self):
    with self.assertRaises(DataError):
      PointCloud(np.zeros((3, 2)))
    with self.assertRaises(DataError):
      PointCloud(np.zeros((0, 3)))
    pts = np.zeros((3, 3))
    pts[2, 1] = np.nan
    with self.assertRaises(DataError) as ctx:
      PointCloud(pts)
    self.assertIn("vertex 2", str(ctx.exception))

  def test_labels_validated(self):
    with self.assertRaises(DataError):
      PointCloud(np.zeros((3, 3)), labels=[0, 1])
    with self.assertRaises(DataError):
      PointCloud(np.zeros((2, 3)), labels=[0, 2])

  def test_points_are_read_only(self):
    cloud = PointCloud(np.zeros((2, 3)))
    with self.assertRaises(ValueError):
      cloud.points[0, 0] = 1.0

  def test_training_split_must_be_normal(self):
    bad = PointCloud(np.zeros((2, 3)), labels=[0, 1], name="x")
    with self.assertRaises(DataError):
      DatasetSplit(train=[bad])


class TestPlyIO(unittest.TestCase):
  def test_round_trip_binary_and_text(self):
    cloud = PointCloud(np.array([[0.5, -1.0, 2.0], [1.0, 0.0, 0.25]]), labels=[0, 1])
    with tempfile.TemporaryDirectory() as tmp:
      for text in (False, True):
        path = Path(tmp) / f"c_{int(text)}.ply"
        save_ply(cloud, path, text=text)
        back = load_ply(path)
        np.testing.assert_array_equal(back.points, cloud.points)
        np.testing.assert_array_equal(back.labels, [0, 1])
        self.assertEqual(back.name, path.stem)

  def test_random_cloud_survives_binary_round_trip(self):
    cloud, _, _ = normalize(make_synthetic("sphere", 500, rng_seed=4))
    scores = np.random.default_rng(4).uniform(0.0, 2.0, cloud.n)
    with tempfile.TemporaryDirectory() as tmp:
      for path in (save_ply(cloud, Path(tmp) / "plain.ply"),
                   save_ply_colored(cloud, scores, Path(tmp) / "heat.ply")):
        back = load_ply(path)
        self.assertTrue(np.array_equal(back.points, cloud.points), path.name)
        self.assertEqual(PlyData.read(str(path))["vertex"].data.dtype["x"], np.dtype("<f8"))

  def test_float32_exact_cloud_stays_single_precision(self):
    cloud = PointCloud(np.array([[0.5, -1.0, 2.0]]))
    self.assertEqual(coordinate_dtype(cloud.points), "<f4")
    with tempfile.TemporaryDirectory() as tmp:
      path = save_ply(cloud, Path(tmp) / "small.ply")
      self.assertEqual(PlyData.read(str(path))["vertex"].data.dtype["x"], np.dtype("<f4"))

  def test_missing_file(self):
    with self.assertRaises(InputError):
      load_ply("/nonexistent/cloud.ply")

  def test_missing_axis(self):
    with tempfile.TemporaryDirectory() as tmp:
      path = Path(tmp) / "xy.ply"
      path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n"
      )
      with self.assertRaises(PlyParseError):
        load_ply(path)

  def test_empty_vertex_element(self):
    with tempfile.TemporaryDirectory() as tmp:
      path = Path(tmp) / "empty.ply"
      path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
      )
      with self.assertRaises(DataError):
        load_ply(path)

  def test_colored_ply(self):
    cloud = PointCloud(np.eye(3))
    with tempfile.TemporaryDirectory() as tmp:
      path = save_ply_colored(cloud, [0.0, 0.5, 1.0], Path(tmp) / "heat.ply")
      vertex = PlyData.read(str(path))["vertex"]
      np.testing.assert_array_equal(vertex["red"], [0, 128, 255])
      np.testing.assert_array_equal(vertex["blue"], [255, 128, 0])
      with self.assertRaises(DataError):
        save_ply_colored(cloud, [0.0], Path(tmp) / "bad.ply")

  def test_constant_scores_are_blue(self):
    colors = scores_to_colors([0.3, 0.3])
    np.testing.assert_array_equal(colors, [[0, 0, 255], [0, 0, 255]])


class TestNormalize(unittest.TestCase):
  def test_centered_unit_scale(self):
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(-5.0, 7.0, (200, 3)))
    normed, center, scale = normalize(cloud)
    np.testing.assert_allclose(normed.points.mean(axis=0), 0.0, atol=1e-12)
    self.assertAlmostEqual(float(np.linalg.norm(normed.points, axis=1).max()), 1.0)
    np.testing.assert_allclose(normed.points * scale + center, cloud.points, atol=1e-12)

  def test_idempotent(self):
    cloud = make_synthetic("box", 500, rng_seed=1)
    once, _, _ = normalize(cloud)
    twice, _, _ = normalize(once)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-9)

  def test_single_point(self):
    normed, center, scale = normalize(PointCloud([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(normed.points, [[0.0, 0.0, 0.0]])
    self.assertEqual(scale, 1.0)


class TestSynthetic(unittest.TestCase):
  def test_shapes_lie_on_surfaces(self):
    sphere = make_synthetic("sphere", 300, rng_seed=0)
    np.testing.assert_allclose(np.linalg.norm(sphere.points, axis=1), 1.0)
    box = make_synthetic("box", 300, rng_seed=0)
    on_face = np.isclose(np.abs(box.points), [0.75, 0.6, 0.5]).any(axis=1)
    self.assertTrue(on_face.all())
    self.assertEqual(sphere.anomalous_points, 0)

  def test_seeded(self):
    a = make_synthetic("cylinder", 200, rng_seed=5)
    b = make_synthetic("cylinder", 200, rng_seed=5)
    np.testing.assert_array_equal(a.points, b.points)

  def test_dent_moves_labeled_points_inward(self):
    normal = make_synthetic("sphere", 2000, rng_seed=3)
    dented = make_synthetic("sphere", 2000, AnomalySpec("dent", 0.3, 0.1), rng_seed=3)
    labeled = dented.labels.astype(bool)
    self.assertGreater(labeled.sum(), 0)
    np.testing.assert_array_equal(dented.points[~labeled], normal.points[~labeled])
    np.testing.assert_allclose(np.linalg.norm(dented.points[labeled], axis=1), 0.9)

  def test_labeled_fraction_grows_with_radius(self):
    counts = [
      make_synthetic("sphere", 2000, AnomalySpec("dent", radius, 0.1), rng_seed=6).anomalous_points
      for radius in (0.1, 0.2, 0.3, 0.4, 0.6)
    ]
    self.assertGreater(counts[0], 0)
    self.assertEqual(counts, sorted(counts))

  def test_zero_depth_has_no_labels(self):
    cloud = make_synthetic("sphere", 500, AnomalySpec("bulge", 0.3, 0.0), rng_seed=0)
    self.assertEqual(cloud.anomalous_points, 0)

  def test_invalid_requests(self):
    with self.assertRaises(ConfigError):
      make_synthetic("torus", 500)
    with self.assertRaises(ConfigError):
      make_synthetic("sphere", 50)
    with self.assertRaises(ConfigError):
      make_synthetic("sphere", 500, AnomalySpec("dent", 1.5, 0.1))


if __name__ == "__main__":  # pragma: no cover
  unittest.main()
