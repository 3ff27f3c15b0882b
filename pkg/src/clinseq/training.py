"""Training loop with the hybrid optimizer, adaptive window and resumable checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .datagen import PackedBatch
from .io_utils import atomic_write_text
from .model import ModelConfig, forward, init_params, loss, loss_ignore_mask
from .optim import HybridOptimizer, OptimConfig

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.jsonl"


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    max_len: int = 256
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.max_len < 1 or self.checkpoint_every < 1:
            raise TrainConfigError("steps >= 0, max_len >= 1 and checkpoint_every >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    params: dict
    optimizer: HybridOptimizer
    step: int = 0
    history: list = field(default_factory=list)


def batch_for_step(step: int, n_batches: int, seed: int) -> int:
    """Batch index for a step: a fresh seeded permutation every epoch."""
    epoch, k = divmod(step, n_batches)
    return int(np.random.default_rng([seed, epoch]).permutation(n_batches)[k])


def unigram_entropy(batches: list[PackedBatch]) -> float:
    """Entropy (nats) of the empirical distribution of all trained-on targets."""
    targets = []
    for b in batches:
        ignore = loss_ignore_mask(b.token_ids, b.layout)
        targets.append(b.token_ids[1:][~ignore[:-1]])
    t = np.concatenate(targets)
    _, counts = np.unique(t, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def make_checkpoint(state: TrainState, model_cfg: ModelConfig, optim_cfg: OptimConfig,
                    train_cfg: TrainConfig, vocab_hash: str) -> Checkpoint:
    config = {"model": model_cfg.to_dict(), "optim": optim_cfg.to_dict(), "train": train_cfg.to_dict(),
              "vocab_hash": vocab_hash, "step": state.step}
    return Checkpoint(config, {n: p.data for n, p in state.params.items()},
                      state.optimizer.t, state.optimizer.state_items())


def restore(ck: Checkpoint) -> tuple[TrainState, ModelConfig, OptimConfig, TrainConfig, str]:
    try:
        model_cfg = ModelConfig.from_dict(ck.config["model"])
        optim_cfg = OptimConfig.from_dict(ck.config["optim"])
        train_cfg = TrainConfig.from_dict(ck.config["train"])
    except (KeyError, TypeError) as err:
        raise CheckpointError(f"checkpoint config incomplete: {err}") from None
    params = init_params(model_cfg)
    if list(params) != list(ck.params):
        raise CheckpointError("checkpoint parameters do not match the model configuration")
    for name, arr in ck.params.items():
        if params[name].shape != arr.shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {params[name].shape}")
        params[name].data = arr.copy()
    opt = HybridOptimizer(params, optim_cfg)
    if ck.optim_step is not None:
        try:
            opt.load_state_items(ck.optim_step, [(n, s, a.copy()) for n, s, a in ck.optim_state])
        except (KeyError, ValueError) as err:
            raise CheckpointError(str(err)) from None
    state = TrainState(params, opt, int(ck.config.get("step", 0)))
    return state, model_cfg, optim_cfg, train_cfg, ck.config.get("vocab_hash", "")


def train_step(state: TrainState, batch: PackedBatch, model_cfg: ModelConfig) -> tuple[float, int, float]:
    w_t = model_cfg.window(state.step)
    state.optimizer.zero_grad()
    logits = forward(batch.token_ids, batch.layout, model_cfg, state.params, state.step)
    value = loss(logits, batch.token_ids, batch.layout)
    value.backward()
    lr_scale = state.optimizer.step()
    state.step += 1
    return float(value.data), w_t, lr_scale


def _log_step(line: str) -> float:
    # a torn final line from an interrupted append sorts past every step and is dropped
    try:
        return json.loads(line)["step"]
    except (ValueError, KeyError, TypeError):
        return float("inf")


def train(batches: list[PackedBatch], model_cfg: ModelConfig, optim_cfg: OptimConfig, train_cfg: TrainConfig,
          vocab_hash: str = "", out_dir=None, resume: Checkpoint | None = None) -> TrainState:
    """Run (or continue) training up to ``train_cfg.steps`` steps.

    With ``out_dir`` every step appends a JSON line ``{step, loss, w_t, lr}``
    to the log and a checkpoint is written every ``checkpoint_every`` steps
    and at the end.
    """
    if not batches:
        raise TrainConfigError("no training batches")
    if resume is not None:
        state, model_cfg, optim_cfg, saved_train, vocab_hash = restore(resume)
        # the batch schedule depends on the saved seed; only the step budget may change
        train_cfg = TrainConfig(**{**saved_train.to_dict(), "steps": train_cfg.steps})
    else:
        params = init_params(model_cfg)
        state = TrainState(params, HybridOptimizer(params, optim_cfg))

    log_path = ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path, ckpt_path = out / LOG_NAME, out / CHECKPOINT_NAME
        # drop log lines past the resume point so the stream stays consistent
        kept = []
        if resume is not None and log_path.exists():
            kept = [ln for ln in log_path.read_text(encoding="utf-8").splitlines() if _log_step(ln) < state.step]
        atomic_write_text(log_path, "".join(ln + "\n" for ln in kept))

    while state.step < train_cfg.steps:
        step = state.step
        b = batches[batch_for_step(step, len(batches), train_cfg.seed)]
        value, w_t, lr_scale = train_step(state, b, model_cfg)
        rec = {"step": step, "loss": value, "w_t": w_t, "lr": optim_cfg.lr * lr_scale}
        state.history.append(rec)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        if ckpt_path is not None and state.step % train_cfg.checkpoint_every == 0:
            make_checkpoint(state, model_cfg, optim_cfg, train_cfg, vocab_hash).save(ckpt_path)
        if step % 50 == 0:
            log.info("step %d loss %.4f window %d", step, value, w_t)
    if ckpt_path is not None:
        make_checkpoint(state, model_cfg, optim_cfg, train_cfg, vocab_hash).save(ckpt_path)
    return state
