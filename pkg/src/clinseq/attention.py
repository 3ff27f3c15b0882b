"""Masked multi-head self-attention with QK-RMSNorm and rotary embeddings.

Two execution paths share everything up to the score computation:

* the block path walks the compiled :class:`BlockMask` one query tile at a
  time and only touches key tiles that are not empty;
* the dense path builds the full score matrix from primitive ops and
  applies :func:`softmax_masked`.  It exists as a reference for the block
  path and for small debugging runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .masking import BlockMask
from .numerics import Tensor, make_op, matmul, reshape, rmsnorm, softmax_masked, transpose


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    rope_base: float = 10000.0
    rope_learnable: bool = False
    norm_eps: float = 1e-12

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError(f"head dimension {self.d_model // self.n_heads} must be even for RoPE")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionStats:
    """Work counters accumulated across attention calls."""

    computed_scores: int = 0
    skipped_blocks: int = 0
    visited_blocks: int = 0

    def reset(self):
        self.computed_scores = self.skipped_blocks = self.visited_blocks = 0


# -- rotary embeddings ---------------------------------------------------
def rope_frequencies(d_k: int, base: float = 10000.0) -> np.ndarray:
    if d_k % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {d_k}")
    return base ** (-2.0 * np.arange(d_k // 2) / d_k)


def rope_rotate(x: Tensor, positions, base: float = 10000.0, log_scale: Tensor | None = None) -> Tensor:
    """Rotate consecutive pairs (x[2i], x[2i+1]) of the last axis by m * theta_i.

    ``x`` has shape ``(..., n, d_k)`` with ``positions`` of length ``n``.  With
    ``log_scale`` (shape ``(h,)`` for ``x`` of shape ``(h, n, d_k)``) the
    frequencies of head ``h`` are multiplied by ``exp(log_scale[h])``.
    """
    d_k = x.shape[-1]
    freqs = rope_frequencies(d_k, base)
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[-2],):
        raise ValueError(f"positions length {pos.shape} does not match sequence axis {x.shape[-2]}")
    angle = pos[:, None] * freqs[None, :]  # (n, d_k/2)
    if log_scale is not None:
        angle = angle[None] * np.exp(log_scale.data)[:, None, None]
    cos, sin = np.cos(angle), np.sin(angle)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        if log_scale is None:
            return gx, None
        oe, oo = out[..., 0::2], out[..., 1::2]
        dangle = -ge * oo + go * oe
        return gx, np.sum(dangle * angle, axis=(1, 2))

    parents = (x,) if log_scale is None else (x, log_scale)
    if log_scale is None:
        return make_op(out, parents, lambda g: backward(g)[:1])
    return make_op(out, parents, backward)


def rope_apply(q: Tensor, k: Tensor, positions, cfg: AttentionConfig, log_scale: Tensor | None = None):
    if q.shape[-1] % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {q.shape[-1]}")
    if not cfg.rope_learnable:
        log_scale = None
    return (rope_rotate(q, positions, cfg.rope_base, log_scale),
            rope_rotate(k, positions, cfg.rope_base, log_scale))


def qk_normalize(q: Tensor, k: Tensor, q_gain: Tensor, k_gain: Tensor, eps: float = 1e-12):
    """Per-head RMSNorm of queries and keys over the head dimension.

    ``q``/``k`` are ``(h, n, d_k)``; gains are ``(h, d_k)``.
    """
    h, _, d_k = q.shape
    qg = reshape(q_gain, (h, 1, d_k))
    kg = reshape(k_gain, (h, 1, d_k))
    return rmsnorm(q, qg, eps), rmsnorm(k, kg, eps)


# -- score/softmax/value core --------------------------------------------
def block_attention(q: Tensor, k: Tensor, v: Tensor, mask: BlockMask, stats: AttentionStats | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k), masked) v computed tile-row by tile-row.

    Only key tiles whose status is not empty are multiplied; fully masked
    rows produce zeros.
    """
    h, n, d_k = q.shape
    if mask.n != n:
        raise ValueError(f"mask covers {mask.n} positions but the sequence has {n}")
    scale = 1.0 / math.sqrt(d_k)
    out = np.zeros_like(v.data)
    saved = []
    for r in range(mask.n_blocks):
        r0, r1 = mask.block_range(r)
        keys, sub = mask.row_plan(r)
        if stats is not None:
            nonempty = int(np.sum(mask.status[r] != 0))
            stats.visited_blocks += nonempty
            stats.skipped_blocks += mask.n_blocks - nonempty
            stats.computed_scores += (r1 - r0) * keys.size
        if keys.size == 0:
            saved.append(None)
            continue
        s = (q.data[:, r0:r1] @ k.data[:, keys].transpose(0, 2, 1)) * scale
        z = np.where(sub, s, -np.inf)
        m = z.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(sub, np.exp(z - m), 0.0)
        den = e.sum(axis=-1, keepdims=True)
        p = np.divide(e, den, out=np.zeros_like(e), where=den > 0)
        out[:, r0:r1] = p @ v.data[:, keys]
        saved.append((keys, p))

    def backward(g):
        gq = np.zeros_like(q.data)
        gk = np.zeros_like(k.data)
        gv = np.zeros_like(v.data)
        for r, item in enumerate(saved):
            if item is None:
                continue
            keys, p = item
            r0, r1 = mask.block_range(r)
            gr = g[:, r0:r1]
            gv[:, keys] += p.transpose(0, 2, 1) @ gr
            dp = gr @ v.data[:, keys].transpose(0, 2, 1)
            ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
            gq[:, r0:r1] += ds @ k.data[:, keys]
            gk[:, keys] += ds.transpose(0, 2, 1) @ q.data[:, r0:r1]
        return gq, gk, gv

    return make_op(out, (q, k, v), backward)


def dense_attention(q: Tensor, k: Tensor, v: Tensor, dense_mask: np.ndarray,
                    stats: AttentionStats | None = None) -> Tensor:
    """Reference path: full score matrix through primitive ops."""
    h, n, d_k = q.shape
    if dense_mask.shape != (n, n):
        raise ValueError(f"mask shape {dense_mask.shape} does not match sequence length {n}")
    if stats is not None:
        stats.computed_scores += n * n
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d_k))
    return matmul(softmax_masked(scores, dense_mask[None]), v)


# -- full attention layer ------------------------------------------------
def attend(x: Tensor, mask, cfg: AttentionConfig, weights, positions=None,
           stats: AttentionStats | None = None) -> Tensor:
    """Multi-head masked self-attention of ``x`` (n, d_model).

    ``mask`` is a :class:`BlockMask` (tile-skipping path) or a dense boolean
    ``(n, n)`` array (reference path).  ``weights`` maps ``wq, wk, wv, wo``
    (d_model x d_model, applied as ``x @ W``), ``q_gain, k_gain`` (h, d_k)
    and optionally ``rope_log_scale`` (h,).  Positions default to
    ``0..n-1``.
    """
    n, d = x.shape
    mask_n = mask.n if isinstance(mask, BlockMask) else np.asarray(mask).shape[0]
    if mask_n != n:
        raise ValueError(f"mask length {mask_n} != sequence length {n}")
    if d != cfg.d_model:
        raise ValueError(f"input width {d} != d_model {cfg.d_model}")
    h, d_k = cfg.n_heads, cfg.d_k
    positions = np.arange(n) if positions is None else positions

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, h, d_k)), (1, 0, 2))

    q = heads(matmul(x, weights["wq"]))
    k = heads(matmul(x, weights["wk"]))
    v = heads(matmul(x, weights["wv"]))
    q, k = qk_normalize(q, k, weights["q_gain"], weights["k_gain"], cfg.norm_eps)
    q, k = rope_apply(q, k, positions, cfg, weights.get("rope_log_scale"))
    if isinstance(mask, BlockMask):
        o = block_attention(q, k, v, mask, stats)
    else:
        o = dense_attention(q, k, v, np.asarray(mask, dtype=bool), stats)
    o = reshape(transpose(o, (1, 0, 2)), (n, d))
    return matmul(o, weights["wo"])


def init_attention_weights(cfg: AttentionConfig, rng: np.random.Generator, std: float = 0.02,
                           out_scale: float = 1.0, requires_grad: bool = True) -> dict:
    d, h, d_k = cfg.d_model, cfg.n_heads, cfg.d_k
    w = {name: Tensor(rng.normal(0.0, std, (d, d)), requires_grad) for name in ("wq", "wk", "wv")}
    w["wo"] = Tensor(rng.normal(0.0, std * out_scale, (d, d)), requires_grad)
    w["q_gain"] = Tensor(np.ones((h, d_k)), requires_grad)
    w["k_gain"] = Tensor(np.ones((h, d_k)), requires_grad)
    if cfg.rope_learnable:
        w["rope_log_scale"] = Tensor(np.zeros(h), requires_grad)
    return w
