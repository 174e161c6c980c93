import unittest

import numpy as np

from gradcheck import check_op, random_params
from mvr.errors import NumericError
from mvr.layers import (
  attention_backward,
  attention_forward,
  block_backward,
  block_forward,
  block_shapes,
  dense_backward,
  dense_forward,
  elu_plus_one,
  gelu_backward,
  gelu_forward,
  layer_norm_backward,
  layer_norm_forward,
  merge_heads,
  mlp_backward,
  mlp_forward,
  patch_embed_backward,
  patch_embed_forward,
  patchify,
  softmax,
  split_heads,
  unpatchify,
)

INSTANCES = 20
D = 4
HEADS = 2


ATTN_SHAPES = {k: v for k, v in block_shapes("", D, 2).items() if k.startswith("attn.")}


class TestLayerGradients(unittest.TestCase):
  def test_dense(self):
    for seed in range(INSTANCES):
      rng = np.random.default_rng(seed)
      p = random_params({"fc.weight": (D, 3), "fc.bias": (3,)}, rng)
      x = rng.standard_normal((2, 3, D))
      check_op(self, lambda x, p: dense_forward(x, p, "fc."), dense_backward, x, p, ["fc.weight", "fc.bias"], rng)

  def test_layer_norm(self):
    for seed in range(INSTANCES):
      rng = np.random.default_rng(100 + seed)
      p = random_params({"ln.gamma": (D,), "ln.beta": (D,)}, rng)
      x = rng.standard_normal((3, D))
      check_op(self, lambda x, p: layer_norm_forward(x, p, "ln."), layer_norm_backward, x, p, ["ln.gamma", "ln.beta"], rng)

  def test_gelu(self):
    for seed in range(INSTANCES):
      rng = np.random.default_rng(200 + seed)
      x = 2.0 * rng.standard_normal((3, D))
      check_op(self, lambda x, p: gelu_forward(x), gelu_backward, x, {}, [], rng)

  def test_mlp(self):
    for seed in range(INSTANCES):
      rng = np.random.default_rng(300 + seed)
      shapes = {"m.fc1.weight": (D, 8), "m.fc1.bias": (8,), "m.fc2.weight": (8, D), "m.fc2.bias": (D,)}
      p = random_params(shapes, rng)
      x = rng.standard_normal((3, D))
      check_op(self, lambda x, p: mlp_forward(x, p, "m."), mlp_backward, x, p, sorted(shapes), rng)

  def _attention(self, kind, offset):
    for seed in range(INSTANCES):
      rng = np.random.default_rng(offset + seed)
      shapes = dict(ATTN_SHAPES)
      p = random_params(shapes, rng)
      x = rng.standard_normal((2, 3, D))
      check_op(
        self,
        lambda x, p: attention_forward(x, p, "attn.", HEADS, kind),
        attention_backward,
        x,
        p,
        sorted(shapes),
        rng,
      )

  def test_softmax_attention(self):
    self._attention("softmax", 400)

  def test_linear_attention(self):
    self._attention("linear", 500)

  def test_block_both_kinds(self):
    for kind in ("softmax", "linear"):
      for seed in range(5):
        rng = np.random.default_rng(600 + seed)
        shapes = block_shapes("b.", D, 2)
        p = random_params(shapes, rng)
        x = rng.standard_normal((3, D))
        check_op(
          self,
          lambda x, p: block_forward(x, p, "b.", HEADS, kind),
          block_backward,
          x,
          p,
          sorted(shapes),
          rng,
        )

  def test_patch_embed(self):
    for seed in range(INSTANCES):
      rng = np.random.default_rng(700 + seed)
      shapes = {"e.patch.weight": (12, D), "e.patch.bias": (D,), "e.pos": (4, D)}
      p = random_params(shapes, rng)
      img = rng.uniform(0.0, 1.0, (4, 4, 3))
      check_op(
        self,
        lambda x, p: patch_embed_forward(x, p, "e.", 2),
        patch_embed_backward,
        img,
        p,
        sorted(shapes),
        rng,
      )


class TestLayerProperties(unittest.TestCase):
  def test_softmax_rows_sum_to_one(self):
    rng = np.random.default_rng(0)
    a = softmax(5.0 * rng.standard_normal((3, 7, 7)))
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)

  def test_single_token_attention_is_projected_value(self):
    rng = np.random.default_rng(1)
    p = random_params(dict(ATTN_SHAPES), rng)
    x = rng.standard_normal((1, D))
    out, _ = attention_forward(x, p, "attn.", HEADS, "softmax")
    qkv = x @ p["attn.qkv.weight"] + p["attn.qkv.bias"]
    v = qkv[:, 2 * D:]
    expected = v @ p["attn.proj.weight"] + p["attn.proj.bias"]
    np.testing.assert_allclose(out, expected, atol=1e-12)

  def test_attention_is_permutation_equivariant(self):
    rng = np.random.default_rng(2)
    p = random_params(dict(ATTN_SHAPES), rng)
    x = rng.standard_normal((6, D))
    perm = rng.permutation(6)
    for kind in ("softmax", "linear"):
      out, _ = attention_forward(x, p, "attn.", HEADS, kind)
      out_p, _ = attention_forward(x[perm], p, "attn.", HEADS, kind)
      np.testing.assert_allclose(out_p, out[perm], atol=1e-10)

  def test_linear_attention_denominators_positive(self):
    rng = np.random.default_rng(3)
    p = random_params(dict(ATTN_SHAPES), rng, scale=3.0)
    x = 4.0 * rng.standard_normal((2, 5, D))
    _, cache = attention_forward(x, p, "attn.", HEADS, "linear")
    den = cache[4][7]
    self.assertTrue(np.all(den > 0))
    self.assertTrue(np.all(elu_plus_one(np.linspace(-30, 30, 61)) > 0))

  def test_non_finite_attention_raises(self):
    rng = np.random.default_rng(4)
    p = random_params(dict(ATTN_SHAPES), rng)
    x = rng.standard_normal((3, D))
    x[1, 0] = np.nan
    with self.assertRaises(NumericError):
      attention_forward(x, p, "attn.", HEADS, "softmax")

  def test_head_split_and_patchify_invert(self):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 5, 6))
    np.testing.assert_array_equal(merge_heads(split_heads(x, 3)), x)
    img = rng.standard_normal((2, 6, 4, 3))
    patches = patchify(img, 2)
    self.assertEqual(patches.shape, (2, 6, 12))
    np.testing.assert_array_equal(patches[0, 0], img[0, :2, :2].ravel())
    np.testing.assert_array_equal(unpatchify(patches, (3, 2), 2, 3), img)


if __name__ == "__main__":  # pragma: no cover
  unittest.main()
