"""Transformer building blocks with hand-written reverse passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache and returns the input gradient
together with a dict of parameter gradients keyed by full tensor name.
Parameters live in a flat ``Mapping[str, ndarray]`` and are addressed by a
dotted ``prefix`` (``"student.decoder.blocks.0.attn."``).

Arrays may carry any number of leading batch axes before ``(tokens, dim)``.
"""

from __future__ import annotations

import math
from typing import Any, Dict, Mapping, Tuple

import numpy as np
from scipy.special import erf

from .errors import NumericError

Params = Mapping[str, np.ndarray]
Grads = Dict[str, np.ndarray]

LN_EPS = 1e-6
ATTENTION_KINDS = ("softmax", "linear")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def accumulate(into: Grads, grads: Mapping[str, np.ndarray]) -> Grads:
  for name, g in grads.items():
    if name in into:
      into[name] = into[name] + g
    else:
      into[name] = g
  return into


def _flat(a: np.ndarray) -> np.ndarray:
  return a.reshape(-1, a.shape[-1])


# ---------------------------------------------------------------------------
# Linear, layer norm, GELU
# ---------------------------------------------------------------------------

def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, Any]:
  return x @ weight + bias, (x, weight)


def linear_backward(dy: np.ndarray, cache: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
  x, weight = cache
  dx = dy @ weight.T
  dw = _flat(x).T @ _flat(dy)
  db = _flat(dy).sum(axis=0)
  return dx, dw, db


def dense_forward(x: np.ndarray, params: Params, prefix: str) -> Tuple[np.ndarray, Any]:
  y, cache = linear_forward(x, params[prefix + "weight"], params[prefix + "bias"])
  return y, (prefix, cache)


def dense_backward(dy: np.ndarray, cache: Any) -> Tuple[np.ndarray, Grads]:
  prefix, inner = cache
  dx, dw, db = linear_backward(dy, inner)
  return dx, {prefix + "weight": dw, prefix + "bias": db}


def layer_norm_forward(x: np.ndarray, params: Params, prefix: str) -> Tuple[np.ndarray, Any]:
  gamma, beta = params[prefix + "gamma"], params[prefix + "beta"]
  mu = x.mean(axis=-1, keepdims=True)
  xc = x - mu
  var = (xc * xc).mean(axis=-1, keepdims=True)
  rstd = 1.0 / np.sqrt(var + LN_EPS)
  xhat = xc * rstd
  return xhat * gamma + beta, (prefix, xhat, rstd, gamma)


def layer_norm_backward(dy: np.ndarray, cache: Any) -> Tuple[np.ndarray, Grads]:
  prefix, xhat, rstd, gamma = cache
  dxhat = dy * gamma
  dx = rstd * (
    dxhat
    - dxhat.mean(axis=-1, keepdims=True)
    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
  )
  grads = {
    prefix + "gamma": _flat(dy * xhat).sum(axis=0),
    prefix + "beta": _flat(dy).sum(axis=0),
  }
  return dx, grads


def gelu_forward(x: np.ndarray) -> Tuple[np.ndarray, Any]:
  """Exact (erf) GELU."""
  cdf = 0.5 * (1.0 + erf(x / _SQRT2))
  return x * cdf, (x, cdf)


def gelu_backward(dy: np.ndarray, cache: Any) -> np.ndarray:
  x, cdf = cache
  pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
  return dy * (cdf + x * pdf)


def mlp_forward(x: np.ndarray, params: Params, prefix: str) -> Tuple[np.ndarray, Any]:
  h, c1 = dense_forward(x, params, prefix + "fc1.")
  a, cg = gelu_forward(h)
  y, c2 = dense_forward(a, params, prefix + "fc2.")
  return y, (c1, cg, c2)


def mlp_backward(dy: np.ndarray, cache: Any) -> Tuple[np.ndarray, Grads]:
  c1, cg, c2 = cache
  da, grads = dense_backward(dy, c2)
  dh = gelu_backward(da, cg)
  dx, g1 = dense_backward(dh, c1)
  return dx, accumulate(grads, g1)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
  """(..., T, D) -> (..., H, T, D/H)"""
  *lead, t, d = x.shape
  return np.swapaxes(x.reshape(*lead, t, heads, d // heads), -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
  """(..., H, T, Dh) -> (..., T, H*Dh)"""
  x = np.swapaxes(x, -2, -3)
  *lead, t, h, dh = x.shape
  return x.reshape(*lead, t, h * dh)


def elu_plus_one(x: np.ndarray) -> np.ndarray:
  return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def elu_plus_one_grad(x: np.ndarray) -> np.ndarray:
  return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0))).astype(x.dtype, copy=False)


def softmax(scores: np.ndarray) -> np.ndarray:
  shifted = scores - scores.max(axis=-1, keepdims=True)
  e = np.exp(shifted)
  return e / e.sum(axis=-1, keepdims=True)


def _check_finite(a: np.ndarray, what: str) -> None:
  if not np.all(np.isfinite(a)):
    raise NumericError(f"non-finite values in {what}")


def attention_forward(
  x: np.ndarray,
  params: Params,
  prefix: str,
  heads: int,
  kind: str = "softmax",
) -> Tuple[np.ndarray, Any]:
  """Multi-head self attention followed by the output projection.

  ``kind="softmax"`` is scaled dot-product attention. ``kind="linear"`` uses
  the elu+1 kernel: out_i = phi(q_i)^T (sum_j phi(k_j) v_j^T) / phi(q_i)^T sum_j phi(k_j).
  """
  if kind not in ATTENTION_KINDS:
    raise ValueError(f"unknown attention kind {kind!r}")
  if x.shape[-2] < 1:
    raise ValueError("attention needs at least one token")
  qkv, c_qkv = dense_forward(x, params, prefix + "qkv.")
  q, k, v = (split_heads(part, heads) for part in np.split(qkv, 3, axis=-1))
  if kind == "softmax":
    scale = 1.0 / math.sqrt(q.shape[-1])
    attn = softmax((q @ np.swapaxes(k, -1, -2)) * scale)
    out = attn @ v
    inner: Tuple[Any, ...] = (q, k, v, attn, scale)
  else:
    fq, fk = elu_plus_one(q), elu_plus_one(k)
    kv = np.swapaxes(fk, -1, -2) @ v  # (..., H, Dh, Dh)
    ksum = fk.sum(axis=-2)  # (..., H, Dh)
    den = np.einsum("...td,...d->...t", fq, ksum)
    out = (fq @ kv) / den[..., None]
    inner = (q, k, v, fq, fk, kv, ksum, den, out)
  _check_finite(out, prefix + "attention")
  y, c_proj = dense_forward(merge_heads(out), params, prefix + "proj.")
  return y, (kind, heads, c_qkv, c_proj, inner)


def attention_backward(dy: np.ndarray, cache: Any) -> Tuple[np.ndarray, Grads]:
  kind, heads, c_qkv, c_proj, inner = cache
  dmerged, grads = dense_backward(dy, c_proj)
  dout = split_heads(dmerged, heads)
  if kind == "softmax":
    q, k, v, attn, scale = inner
    dattn = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dout
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (np.swapaxes(dscores, -1, -2) @ q) * scale
  else:
    q, k, v, fq, fk, kv, ksum, den, out = inner
    dnum = dout / den[..., None]
    dden = -(dout * out).sum(axis=-1) / den
    dfq = dnum @ np.swapaxes(kv, -1, -2) + dden[..., None] * ksum[..., None, :]
    dkv = np.swapaxes(fq, -1, -2) @ dnum
    dksum = np.einsum("...t,...td->...d", dden, fq)
    dfk = v @ np.swapaxes(dkv, -1, -2) + dksum[..., None, :]
    dv = fk @ dkv
    dq = dfq * elu_plus_one_grad(q)
    dk = dfk * elu_plus_one_grad(k)
  dqkv = np.concatenate([merge_heads(dq), merge_heads(dk), merge_heads(dv)], axis=-1)
  dx, g_qkv = dense_backward(dqkv, c_qkv)
  return dx, accumulate(grads, g_qkv)


# ---------------------------------------------------------------------------
# Pre-norm transformer block
# ---------------------------------------------------------------------------

def block_forward(
  x: np.ndarray,
  params: Params,
  prefix: str,
  heads: int,
  kind: str = "softmax",
) -> Tuple[np.ndarray, Any]:
  n1, c_ln1 = layer_norm_forward(x, params, prefix + "norm1.")
  a, c_attn = attention_forward(n1, params, prefix + "attn.", heads, kind)
  h = x + a
  n2, c_ln2 = layer_norm_forward(h, params, prefix + "norm2.")
  m, c_mlp = mlp_forward(n2, params, prefix + "mlp.")
  return h + m, (c_ln1, c_attn, c_ln2, c_mlp)


def block_backward(dy: np.ndarray, cache: Any) -> Tuple[np.ndarray, Grads]:
  c_ln1, c_attn, c_ln2, c_mlp = cache
  dn2, grads = mlp_backward(dy, c_mlp)
  dh_norm, g = layer_norm_backward(dn2, c_ln2)
  accumulate(grads, g)
  dh = dy + dh_norm
  dn1, g = attention_backward(dh, c_attn)
  accumulate(grads, g)
  dx_norm, g = layer_norm_backward(dn1, c_ln1)
  accumulate(grads, g)
  return dh + dx_norm, grads


def block_shapes(prefix: str, dim: int, mlp_ratio: int) -> Dict[str, Tuple[int, ...]]:
  hidden = dim * mlp_ratio
  return {
    prefix + "norm1.gamma": (dim,),
    prefix + "norm1.beta": (dim,),
    prefix + "attn.qkv.weight": (dim, 3 * dim),
    prefix + "attn.qkv.bias": (3 * dim,),
    prefix + "attn.proj.weight": (dim, dim),
    prefix + "attn.proj.bias": (dim,),
    prefix + "norm2.gamma": (dim,),
    prefix + "norm2.beta": (dim,),
    prefix + "mlp.fc1.weight": (dim, hidden),
    prefix + "mlp.fc1.bias": (hidden,),
    prefix + "mlp.fc2.weight": (hidden, dim),
    prefix + "mlp.fc2.bias": (dim,),
  }


# ---------------------------------------------------------------------------
# Patch embedding
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
  """(..., H, W, C) -> (..., H/p * W/p, p*p*C), patches in row-major grid order."""
  *lead, h, w, c = images.shape
  gh, gw = h // patch, w // patch
  x = images.reshape(*lead, gh, patch, gw, patch, c)
  x = np.moveaxis(x, -4, -3)  # (..., gh, gw, p, p, c)
  return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, grid: Tuple[int, int], patch: int, channels: int) -> np.ndarray:
  *lead, _, _ = patches.shape
  gh, gw = grid
  x = patches.reshape(*lead, gh, gw, patch, patch, channels)
  x = np.moveaxis(x, -3, -4)  # (..., gh, p, gw, p, c)
  return x.reshape(*lead, gh * patch, gw * patch, channels)


def patch_embed_forward(
  images: np.ndarray,
  params: Params,
  prefix: str,
  patch: int,
) -> Tuple[np.ndarray, Any]:
  """Linear patch projection plus learned positional embedding; no class token."""
  h, w, c = images.shape[-3:]
  patches = patchify(images, patch)
  tokens, c_proj = dense_forward(patches, params, prefix + "patch.")
  tokens = tokens + params[prefix + "pos"]
  return tokens, (c_proj, (h // patch, w // patch), patch, c, prefix)


def patch_embed_backward(dy: np.ndarray, cache: Any) -> Tuple[np.ndarray, Grads]:
  c_proj, grid, patch, channels, prefix = cache
  dpatches, grads = dense_backward(dy, c_proj)
  grads[prefix + "pos"] = _flat(dy).reshape(-1, *dy.shape[-2:]).sum(axis=0)
  return unpatchify(dpatches, grid, patch, channels), grads
