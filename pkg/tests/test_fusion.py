import unittest

import numpy as np

from gradcheck import numerical_grad, relative_error
from mvr.autograd import GradTape, backward_pass
from mvr.backbone import FeatureMap
from mvr.errors import DataError, LogicError
from mvr.fusion import (
  AnomalyResult,
  FusedPointFeatures,
  ProjectionPlan,
  anomaly_scores,
  backproject_view,
  bilinear_taps,
  fuse_views,
  interpolation_matrix,
  project_tokens,
  sample_patch_features,
  upsample_patch_features,
)
from mvr.loss import LossConfig, global_cosine_loss


def fmap_from(data):
  data = np.asarray(data, dtype=np.float64)
  return FeatureMap(data.shape[0], data.shape[1], data.shape[2], data)


def random_entries(rng, n_points, size, count):
  pts = rng.choice(n_points, size=count, replace=False)
  u = rng.integers(0, size, count)
  v = rng.integers(0, size, count)
  return np.stack([pts, u, v], axis=1)


class TestUpsample(unittest.TestCase):
  def test_constant_map_stays_constant(self):
    out = upsample_patch_features(fmap_from(np.full((3, 3, 2), 0.7)), (12, 12))
    self.assertEqual(out.shape, (12, 12, 2))
    np.testing.assert_allclose(out, 0.7)

  def test_single_patch_broadcasts(self):
    out = upsample_patch_features(fmap_from([[[1.0, -2.0]]]), (5, 7))
    np.testing.assert_allclose(out, np.broadcast_to([1.0, -2.0], (5, 7, 2)))

  def test_interpolation_rows_sum_to_one(self):
    m = interpolation_matrix(10, 3)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)

  def test_patch_centre_reads_patch_value(self):
    data = np.arange(16, dtype=np.float64).reshape(2, 2, 4)
    fm = fmap_from(data)
    out = sample_patch_features(fm, [0.5], [0.5], (4, 4))
    np.testing.assert_allclose(out[0], data[0, 0])
    out = sample_patch_features(fm, [2.5], [0.5], (4, 4))
    np.testing.assert_allclose(out[0], data[0, 1])

  def test_midpoint_of_four_patches(self):
    data = np.random.default_rng(0).standard_normal((2, 2, 3))
    out = sample_patch_features(fmap_from(data), [1.5], [1.5], (4, 4))
    np.testing.assert_allclose(out[0], data.reshape(4, 3).mean(axis=0))

  def test_bilinear_weights_sum_to_one(self):
    rng = np.random.default_rng(1)
    _, wts = bilinear_taps(rng.uniform(0, 31, 50), rng.uniform(0, 31, 50), (4, 4), (32, 32))
    np.testing.assert_allclose(wts.sum(axis=1), 1.0)
    self.assertTrue(np.all(wts >= 0))


class TestBackprojectAndFuse(unittest.TestCase):
  def test_backproject_reads_owner_pixels(self):
    grid = np.arange(2 * 3 * 2, dtype=np.float64).reshape(2, 3, 2)
    pts, t, s = backproject_view(np.array([[4, 2, 1], [0, 0, 0]]), grid, -grid)
    np.testing.assert_array_equal(pts, [4, 0])
    np.testing.assert_array_equal(t, [grid[1, 2], grid[0, 0]])
    np.testing.assert_array_equal(s, -t)

  def test_backproject_out_of_range(self):
    with self.assertRaises(LogicError):
      backproject_view(np.array([[0, 3, 0]]), np.zeros((2, 3, 1)))

  def test_fuse_views_averages_seen_views(self):
    view_a = (np.array([0, 1]), np.array([[1.0], [5.0]]), np.array([[2.0], [6.0]]))
    view_b = (np.array([0]), np.array([[3.0]]), np.array([[4.0]]))
    fused = fuse_views([view_a, view_b], n_points=3)
    np.testing.assert_allclose(fused.teacher[:, 0], [2.0, 5.0, 0.0])
    np.testing.assert_allclose(fused.student[:, 0], [3.0, 6.0, 0.0])
    np.testing.assert_array_equal(fused.visibility_count, [2, 1, 0])
    self.assertEqual(fused.invisible_count, 1)

    fused_all = fuse_views([view_a, view_b], n_points=3, mode="all")
    np.testing.assert_allclose(fused_all.teacher[:, 0], [2.0, 2.5, 0.0])

  def test_fuse_views_ignores_view_order(self):
    rng = np.random.default_rng(2)
    views = []
    for _ in range(4):
      e = random_entries(rng, 20, 8, 10)
      views.append((e[:, 0], rng.standard_normal((10, 3)), rng.standard_normal((10, 3))))
    a = fuse_views(views, 20)
    b = fuse_views(views[::-1], 20)
    np.testing.assert_allclose(a.teacher, b.teacher, atol=1e-12)
    np.testing.assert_allclose(a.student, b.student, atol=1e-12)

  def test_fuse_views_matches_loop_oracle(self):
    rng = np.random.default_rng(5)
    for _ in range(100):
      n_points = int(rng.integers(1, 40))
      n_views = int(rng.integers(1, 6))
      channels = int(rng.integers(1, 5))
      views = []
      for _ in range(n_views):
        count = int(rng.integers(0, n_points + 1))
        pts = rng.choice(n_points, size=count, replace=False)
        views.append((pts, rng.standard_normal((count, channels)), rng.standard_normal((count, channels))))
      fused = fuse_views(views, n_points)
      for p in range(n_points):
        seen_t = [t[i] for pts, t, _ in views for i in range(len(pts)) if pts[i] == p]
        seen_s = [s[i] for pts, _, s in views for i in range(len(pts)) if pts[i] == p]
        self.assertEqual(fused.visibility_count[p], len(seen_t))
        if seen_t:
          np.testing.assert_allclose(fused.teacher[p], np.mean(seen_t, axis=0), rtol=0, atol=1e-12)
          np.testing.assert_allclose(fused.student[p], np.mean(seen_s, axis=0), rtol=0, atol=1e-12)
        else:
          np.testing.assert_array_equal(fused.teacher[p], 0.0)
          np.testing.assert_array_equal(fused.student[p], 0.0)

  def test_fused_rejects_non_finite_visible(self):
    bad = np.array([[np.nan]])
    with self.assertRaises(DataError):
      FusedPointFeatures(bad, bad.copy(), np.array([1]))


class TestProjectionPlan(unittest.TestCase):
  def setUp(self):
    rng = np.random.default_rng(3)
    self.grid = (2, 2)
    self.target = (8, 8)
    self.n_points = 30
    self.entries = [random_entries(rng, self.n_points, 8, 12) for _ in range(3)]
    self.maps = rng.standard_normal((3, 4, 5))

  def test_matches_upsample_and_fuse(self):
    for mode in ("visible", "all"):
      plan = ProjectionPlan.build(self.entries, self.grid, self.target, self.n_points, mode)
      per_view = []
      for k, e in enumerate(self.entries):
        pixels = upsample_patch_features(fmap_from(self.maps[k].reshape(2, 2, 5)), self.target)
        per_view.append(backproject_view(e, pixels))
      expected = fuse_views(per_view, self.n_points, mode=mode)
      np.testing.assert_allclose(plan.apply(self.maps), expected.teacher, atol=1e-12)
      np.testing.assert_array_equal(plan.visibility_count, expected.visibility_count)
      self.assertEqual(plan.view_counts, [12, 12, 12])

  def test_backward_is_adjoint(self):
    plan = ProjectionPlan.build(self.entries, self.grid, self.target, self.n_points)
    g = np.random.default_rng(4).standard_normal((self.n_points, 5))
    lhs = np.sum(plan.apply(self.maps) * g)
    rhs = np.sum(self.maps * plan.backward(g))
    self.assertAlmostEqual(lhs, rhs, places=10)

  def test_gradient_through_cosine_loss(self):
    config = LossConfig(k_pct=0.5, shrink_factor=1.0)
    for seed in range(20):
      rng = np.random.default_rng(20 + seed)
      entries = [random_entries(rng, self.n_points, 8, 12) for _ in range(3)]
      plan = ProjectionPlan.build(entries, self.grid, self.target, self.n_points)
      seen = plan.visibility_count > 0
      maps = rng.standard_normal((3, 4, 5))
      teacher = rng.standard_normal((int(seen.sum()), 5))

      result = global_cosine_loss([teacher], [plan.apply(maps)[seen]], config)
      upstream = np.zeros((self.n_points, 5))
      upstream[seen] = result.grads[0]
      analytic = plan.backward(upstream)

      def f():
        return global_cosine_loss([teacher], [plan.apply(maps)[seen]], config, mask=result.mask).loss

      numeric = numerical_grad(f, [maps])[0]
      self.assertLess(relative_error(analytic, numeric), 1e-4)

  def test_tape_backward(self):
    plan = ProjectionPlan.build(self.entries, self.grid, self.target, self.n_points)
    tape = GradTape()
    out = project_tokens(self.maps, plan, tape)
    g = np.ones_like(out)
    grads, dmaps = backward_pass(tape, g)
    self.assertEqual(grads, {})
    np.testing.assert_allclose(dmaps, plan.backward(g))

  def test_wrong_map_shape(self):
    plan = ProjectionPlan.build(self.entries, self.grid, self.target, self.n_points)
    with self.assertRaises(LogicError):
      plan.apply(np.zeros((2, 4, 5)))

  def test_stale_pixels_rejected(self):
    with self.assertRaises(LogicError):
      ProjectionPlan.build([np.array([[0, 9, 0]])], self.grid, self.target, 2)


class TestAnomalyScores(unittest.TestCase):
  def test_scores_and_object_max(self):
    teacher = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    student = np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    fused = FusedPointFeatures(teacher, student, np.array([1, 2, 0]))
    result = anomaly_scores(fused, [2, 1])
    np.testing.assert_allclose(result.point_scores, [0.0, 1.0, 0.0], atol=1e-12)
    self.assertAlmostEqual(result.object_score, 1.0)
    self.assertEqual(result.invisible_count, 1)

  def test_json_round_trip_keeps_diagnostics(self):
    result = AnomalyResult(np.array([0.1, 0.4]), 0.4, {"invisible_count": 1, "view_visible_counts": [2]})
    data = result.to_json("cloud")
    self.assertEqual(data["name"], "cloud")
    back = AnomalyResult.from_json(data)
    np.testing.assert_allclose(back.point_scores, result.point_scores)
    self.assertEqual(back.invisible_count, 1)


if __name__ == "__main__":  # pragma: no cover
  unittest.main()
