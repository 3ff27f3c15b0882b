"""Encoder/decoder-half transformer with learnable U-Net skip connections.

Layers ``0 .. n_layers/2 - 1`` form the encoder half: after each block the
residual stream is pushed onto a :class:`SkipStore`.  Decoder layers pop
the most recent entry (so decoder layer ``l`` pairs with encoder layer
``n_layers - 1 - l``) and add it, scaled by a learnable scalar, to the
stream before running their block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .attention import AttentionConfig, AttentionStats, attend, init_attention_weights
from .io_utils import atomic_write_text
from .masking import (DEFAULT_BLOCK_SIZE, MaskSpec, SequenceLayout, adaptive_window, compile_block_mask,
                      materialize)
from .numerics import Tensor, cross_entropy, embedding, gelu, matmul, rmsnorm

PARAM_STD = 0.02


class ModelConfigError(ValueError):
    pass


class SkipStackError(RuntimeError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    mlp_ratio: int = 4
    w_base: int = 32
    alpha: int = 16
    window_interval: int = 50
    w_max: int = 128
    block_size: int = DEFAULT_BLOCK_SIZE
    lambda_init: float = 1.0
    rope_base: float = 10000.0
    rope_learnable: bool = False
    norm_eps: float = 1e-12
    max_len: int = 1024
    use_skips: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 2 or self.n_layers % 2:
            raise ModelConfigError(f"n_layers must be even and >= 2, got {self.n_layers}")
        for name in ("vocab_size", "d_model", "n_heads", "mlp_ratio", "w_base", "window_interval",
                     "w_max", "block_size", "max_len"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.alpha < 0:
            raise ModelConfigError("alpha must be >= 0")
        self.attention  # validates head geometry

    @property
    def attention(self) -> AttentionConfig:
        try:
            return AttentionConfig(self.d_model, self.n_heads, self.rope_base, self.rope_learnable, self.norm_eps)
        except ValueError as err:
            raise ModelConfigError(str(err)) from None

    @property
    def half(self) -> int:
        return self.n_layers // 2

    def window(self, step: int) -> int:
        return adaptive_window(step, self.w_base, self.alpha, self.window_interval, self.w_max, self.block_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class SkipStore:
    """Stack of encoder-half activations consumed by the decoder half."""

    def __init__(self, depth: int):
        self.depth = depth
        self._stack: list[Tensor] = []
        self.pushes = 0
        self.pops = 0

    def push(self, x: Tensor) -> None:
        if len(self._stack) >= self.depth:
            raise SkipStackError("skip store overflow")
        self._stack.append(x)
        self.pushes += 1

    def pop(self) -> Tensor:
        if not self._stack:
            raise SkipStackError("skip store underflow")
        self.pops += 1
        return self._stack.pop()

    def __len__(self):
        return len(self._stack)


# -- parameters ----------------------------------------------------------
def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Seeded parameters in declaration order (checkpoint order)."""
    rng = np.random.default_rng(cfg.seed)
    d, V = cfg.d_model, cfg.vocab_size
    out_scale = 1.0 / math.sqrt(2 * cfg.n_layers)
    p: dict[str, Tensor] = {"tok_emb": Tensor(rng.normal(0.0, PARAM_STD, (V, d)), True)}
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        if l >= cfg.half:
            p[pre + "skip_lambda"] = Tensor(np.full(1, cfg.lambda_init), True)
        p[pre + "attn_norm"] = Tensor(np.ones(d), True)
        for name, t in init_attention_weights(cfg.attention, rng, PARAM_STD, out_scale).items():
            p[pre + "attn." + name] = t
        p[pre + "mlp_norm"] = Tensor(np.ones(d), True)
        p[pre + "mlp.w1"] = Tensor(rng.normal(0.0, PARAM_STD, (d, cfg.mlp_ratio * d)), True)
        p[pre + "mlp.w2"] = Tensor(rng.normal(0.0, PARAM_STD * out_scale, (cfg.mlp_ratio * d, d)), True)
    p["final_norm"] = Tensor(np.ones(d), True)
    p["head"] = Tensor(rng.normal(0.0, PARAM_STD, (d, V)), True)
    return p


def _layer_weights(params, l: int) -> dict:
    pre = f"layers.{l}.attn."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


# -- forward -------------------------------------------------------------
def build_mask(layout: SequenceLayout, cfg: ModelConfig, step: int = 0, dense: bool = False):
    spec = MaskSpec(layout, cfg.window(step))
    return materialize(spec) if dense else compile_block_mask(spec, cfg.block_size)


def block(x: Tensor, params, l: int, cfg: ModelConfig, mask, positions, stats=None) -> Tensor:
    pre = f"layers.{l}."
    a = rmsnorm(x, params[pre + "attn_norm"], cfg.norm_eps)
    x = x + attend(a, mask, cfg.attention, _layer_weights(params, l), positions, stats)
    m = rmsnorm(x, params[pre + "mlp_norm"], cfg.norm_eps)
    return x + matmul(gelu(matmul(m, params[pre + "mlp.w1"])), params[pre + "mlp.w2"])


def forward(token_ids, layout: SequenceLayout, cfg: ModelConfig, params, step: int = 0, *,
            mask=None, dense: bool = False, stats: AttentionStats | None = None,
            hidden: list | None = None, skip_probes: dict | None = None) -> Tensor:
    """Logits ``(n, vocab_size)``.

    The mask is built from ``layout`` with window ``cfg.window(step)`` unless
    an explicit BlockMask or dense mask is passed.  Intermediate residual
    streams are appended to ``hidden`` when given.  ``skip_probes`` maps a
    decoder layer index to a zero tensor added to the popped skip activation,
    so its gradient equals d(loss)/d(s_l).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    n = ids.shape[0]
    if len(layout) != n:
        raise ValueError(f"layout length {len(layout)} != token count {n}")
    if n > cfg.max_len:
        raise SequenceLengthError(f"sequence of {n} tokens exceeds max_len {cfg.max_len}")
    if mask is None:
        mask = build_mask(layout, cfg, step, dense)
    positions = layout.positions()

    x = embedding(params["tok_emb"], ids)
    store = SkipStore(cfg.half)
    for l in range(cfg.n_layers):
        if l >= cfg.half:
            s = store.pop()
            if skip_probes is not None and l in skip_probes:
                s = s + skip_probes[l]
            if cfg.use_skips:
                x = x + params[f"layers.{l}.skip_lambda"] * s
        x = block(x, params, l, cfg, mask, positions, stats)
        if l < cfg.half:
            store.push(x)
        if hidden is not None:
            hidden.append(x)
    if len(store) or store.pushes != cfg.half or store.pops != cfg.half:
        raise SkipStackError("skip store not balanced at the end of the forward pass")
    x = rmsnorm(x, params["final_norm"], cfg.norm_eps)
    return matmul(x, params["head"])


def loss_ignore_mask(token_ids, layout: SequenceLayout) -> np.ndarray:
    """True where position i must not be trained to predict token i+1."""
    n = len(layout)
    seg = layout.segments()
    ignore = np.ones(n, dtype=bool)
    if n < 2:
        return ignore
    nxt_ok = (~layout.pad_flags[1:]) & (~layout.static_flags[1:]) & (seg[1:] == seg[:-1]) & (seg[:-1] >= 0)
    ignore[:-1] = ~nxt_ok
    return ignore


def loss(logits: Tensor, token_ids, layout: SequenceLayout, patient=None) -> Tensor:
    """Mean next-token cross-entropy.

    ``patient`` restricts the average to query positions of one run index
    (see :meth:`SequenceLayout.segments`).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    ignore = loss_ignore_mask(ids, layout)
    if patient is not None:
        ignore |= layout.segments() != patient
    targets = np.zeros_like(ids)
    targets[:-1] = ids[1:]
    return cross_entropy(logits, targets, ignore)


# -- generation ----------------------------------------------------------
def sample_next(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Sample from softmax(logits / temperature); temperature 0 is argmax."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    logits = np.asarray(logits, dtype=np.float64)
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(p.size, p=p))


def generate(prefix_ids, layout: SequenceLayout, cfg: ModelConfig, params, n_steps: int,
             temperature: float = 1.0, seed: int = 0, step: int = 0) -> np.ndarray:
    """Autoregressively extend the last patient of ``layout`` by ``n_steps`` tokens."""
    ids = list(np.asarray(prefix_ids, dtype=np.int64))
    if len(ids) > cfg.max_len:
        raise SequenceLengthError(f"prefix of {len(ids)} tokens exceeds max_len {cfg.max_len}")
    if len(ids) + n_steps > cfg.max_len:
        raise SequenceLengthError(f"generation would reach {len(ids) + n_steps} tokens > max_len {cfg.max_len}")
    if n_steps and not ids:
        raise ValueError("generation needs a non-empty prefix")
    rng = np.random.default_rng(seed)
    pid = layout.patient_ids[-1] if len(layout) else None
    for _ in range(n_steps):
        logits = forward(ids, layout, cfg, params, step)
        ids.append(sample_next(logits.data[-1], temperature, rng))
        layout = layout.extend(pid)
    return np.asarray(ids, dtype=np.int64)


# -- embedding export ----------------------------------------------------
def embeddings_csv(params, vocab) -> str:
    emb = params["tok_emb"].data
    header = "token," + ",".join(f"dim{i}" for i in range(emb.shape[1]))
    lines = [header]
    for i, row in enumerate(emb):
        name = vocab.name(i)
        if any(ch in name for ch in ',"\n'):
            name = '"' + name.replace('"', '""') + '"'
        lines.append(name + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def export_embeddings(params, vocab, path) -> None:
    """Write ``vocab_size x d_model`` embeddings as CSV, one row per token id."""
    atomic_write_text(path, embeddings_csv(params, vocab))


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    import csv

    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    names = [r[0] for r in rows[1:]]
    return names, np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
