"""Hybrid optimizer: orthogonalized momentum for 2-D weights, Adam elsewhere."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

# Newton-Schulz polynomial f(x) = (15x - 10x^3 + 3x^5) / 8.  f(1) = 1 exactly
# and f'(1) = f''(1) = 0, so orthogonal inputs are fixed points; f'(0) = 15/8.
NS_COEFFS = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0)
POWER_ITERS = 30


class OptimConfigError(ValueError):
    pass


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.02
    momentum: float = 0.9
    ns_steps: int = 5
    adam_lr: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    literal_eq11: bool = False
    warmup_steps: int = 100
    clip_norm: float | None = None

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise OptimConfigError("momentum must lie in [0, 1)")
        if self.ns_steps < 1:
            raise OptimConfigError("ns_steps must be >= 1")
        if self.warmup_steps < 0:
            raise OptimConfigError("warmup_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise OptimConfigError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**d)


def spectral_norm_estimate(x: np.ndarray) -> float:
    """Largest singular value by power iteration on the smaller Gram matrix."""
    g = x.T @ x if x.shape[0] >= x.shape[1] else x @ x.T
    v = np.ones(g.shape[0]) + np.linspace(0.0, 0.5, g.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(POWER_ITERS):
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        lam = float(v @ w)
        v = w / nw
    return float(np.sqrt(max(lam, float(v @ g @ v))))


def newton_schulz_orth(x: np.ndarray, ns_steps: int = 5) -> np.ndarray:
    """Push the singular values of ``x`` toward 1, keeping its singular vectors.

    ``x`` is first divided by its spectral norm; the polynomial is then
    iterated on the smaller Gram side.  A zero matrix is returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"newton_schulz_orth expects a matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("newton_schulz_orth input must be finite")
    sigma = spectral_norm_estimate(x)
    if sigma == 0.0:
        return np.zeros_like(x)
    tall = x.shape[0] > x.shape[1]
    y = (x.T if tall else x) / sigma
    a, b, c = NS_COEFFS
    for _ in range(ns_steps):
        gram = y @ y.T
        y = a * y + (b * gram + c * gram @ gram) @ y
    return y.T if tall else y


# -- per-parameter steps -------------------------------------------------
def muon_step(param: np.ndarray, grad: np.ndarray, v: np.ndarray, cfg: OptimConfig, lr_scale: float = 1.0):
    """Return ``(new_param, new_v)``.

    Default: v <- beta v + (1 - beta) g; param <- param - lr * orth(v).
    With ``cfg.literal_eq11``: param <- orth(param - lr * v).
    """
    if param.ndim != 2:
        raise RoutingError(f"orthogonalized update needs a 2-D parameter, got shape {param.shape}")
    beta = cfg.momentum
    v = beta * v + (1.0 - beta) * grad
    lr = cfg.lr * lr_scale
    if cfg.literal_eq11:
        return newton_schulz_orth(param - lr * v, cfg.ns_steps), v
    return param - lr * newton_schulz_orth(v, cfg.ns_steps), v


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, s: np.ndarray, cfg: OptimConfig, t: int,
              lr_scale: float = 1.0):
    """Bias-corrected Adam; ``t`` counts from 1.  Returns ``(param, m, s)``."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    m = b1 * m + (1 - b1) * grad
    s = b2 * s + (1 - b2) * grad * grad
    mhat = m / (1 - b1**t)
    shat = s / (1 - b2**t)
    return param - cfg.adam_lr * lr_scale * mhat / (np.sqrt(shat) + cfg.adam_eps), m, s


# -- routing -------------------------------------------------------------
MUON_SUFFIXES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2")
ADAM_SUFFIXES = ("tok_emb", "head", "_norm", "q_gain", "k_gain", "skip_lambda", "rope_log_scale")


def route_params(params) -> tuple[list[str], list[str]]:
    """Split parameter names into (muon, adam) sets; the split is total."""
    muon, adam = [], []
    for name, p in params.items():
        shape = p.shape
        if name.endswith(MUON_SUFFIXES):
            if len(shape) != 2:
                raise RoutingError(f"parameter {name!r} routed to the matrix optimizer is not 2-D")
            muon.append(name)
        elif name.endswith(ADAM_SUFFIXES):
            adam.append(name)
        else:
            raise RoutingError(f"parameter {name!r} has no optimizer route")
    return muon, adam


class HybridOptimizer:
    """Owns optimizer state for a parameter dict and applies one step at a time."""

    def __init__(self, params, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.muon, self.adam = route_params(params)
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}
        for name in self.muon:
            self.state[name] = {"v": np.zeros_like(params[name].data)}
        for name in self.adam:
            self.state[name] = {"m": np.zeros_like(params[name].data), "s": np.zeros_like(params[name].data)}

    def lr_scale(self, step: int) -> float:
        w = self.cfg.warmup_steps
        return 1.0 if w == 0 else min(1.0, (step + 1) / w)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update from the accumulated ``.grad``; returns the lr multiplier used."""
        scale = self.lr_scale(self.t)
        self.t += 1
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}
        if self.cfg.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.cfg.clip_norm:
                grads = {n: g * (self.cfg.clip_norm / total) for n, g in grads.items()}
        for name in self.muon:
            p = self.params[name]
            p.data, self.state[name]["v"] = muon_step(p.data, grads[name], self.state[name]["v"], self.cfg, scale)
        for name in self.adam:
            p = self.params[name]
            st = self.state[name]
            p.data, st["m"], st["s"] = adam_step(p.data, grads[name], st["m"], st["s"], self.cfg, self.t, scale)
        return scale

    # serialisation helpers: ordered list of (name, slot, array)
    def state_items(self) -> list[tuple[str, str, np.ndarray]]:
        return [(n, slot, arr) for n in self.params if n in self.state for slot, arr in self.state[n].items()]

    def load_state_items(self, t: int, items) -> None:
        self.t = int(t)
        for name, slot, arr in items:
            if name not in self.state or slot not in self.state[name]:
                raise KeyError(f"unexpected optimizer slot {name}/{slot}")
            if self.state[name][slot].shape != arr.shape:
                raise ValueError(f"optimizer slot {name}/{slot} shape mismatch")
            self.state[name][slot] = arr
