"""Patient-aware, sliding-window and block-sparse attention masks.

A :class:`MaskSpec` is a declarative description (layout + optional window)
that can be materialised densely or compiled into a :class:`BlockMask` that
classifies every ``B x B`` tile as empty, full or partial.  The rules:

* a query may only see keys of the same patient;
* within a patient, keys at or before the query, plus every static key of
  that patient regardless of position;
* with a window ``w``, non-static keys must also satisfy ``i - j < w``;
* padding neither attends nor is attended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io_utils import atomic_write_bytes, atomic_write_text

DEFAULT_BLOCK_SIZE = 16

EMPTY, PARTIAL, FULL = 0, 1, 2


class LayoutError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SequenceLayout:
    """Per-position patient ids, static flags and padding flags."""

    patient_ids: np.ndarray
    static_flags: np.ndarray
    pad_flags: np.ndarray

    def __init__(self, patient_ids, static_flags=None, pad_flags=None, validate: bool = True):
        pids = np.asarray(patient_ids)
        n = pids.shape[0]
        static = np.zeros(n, bool) if static_flags is None else np.asarray(static_flags, dtype=bool)
        pad = np.zeros(n, bool) if pad_flags is None else np.asarray(pad_flags, dtype=bool)
        object.__setattr__(self, "patient_ids", pids)
        object.__setattr__(self, "static_flags", static)
        object.__setattr__(self, "pad_flags", pad)
        if validate:
            self.validate()

    def __len__(self):
        return int(self.patient_ids.shape[0])

    @property
    def n(self) -> int:
        return len(self)

    def validate(self) -> None:
        n = len(self)
        if self.static_flags.shape != (n,) or self.pad_flags.shape != (n,):
            raise LayoutError("patient_ids, static_flags and pad_flags must have equal length")
        if np.any(self.static_flags & self.pad_flags):
            raise LayoutError("a position cannot be both static and padding")
        real = np.flatnonzero(~self.pad_flags)
        seen = set()
        prev = None
        in_events = False
        for i in real:
            p = self.patient_ids[i].item() if hasattr(self.patient_ids[i], "item") else self.patient_ids[i]
            if p != prev:
                if p in seen:
                    raise LayoutError(f"patient {p!r} positions are not one contiguous run (position {i})")
                seen.add(p)
                prev, in_events = p, False
            elif i != last + 1:
                raise LayoutError(f"patient {p!r} run is interrupted by padding at position {last + 1}")
            if self.static_flags[i]:
                if in_events:
                    raise LayoutError(f"static token at position {i} follows an event of patient {p!r}")
            else:
                in_events = True
            last = i

    def segments(self) -> np.ndarray:
        """Dense run index per position (0, 1, ...), -1 for padding."""
        seg = np.full(len(self), -1, dtype=np.int64)
        real = ~self.pad_flags
        if real.any():
            pid = self.patient_ids[real]
            change = np.ones(pid.shape[0], dtype=np.int64)
            change[1:] = pid[1:] != pid[:-1]
            seg[real] = np.cumsum(change) - 1
        return seg

    def positions(self) -> np.ndarray:
        """Token index within each patient's run (RoPE positions); 0 for padding."""
        seg = self.segments()
        pos = np.zeros(len(self), dtype=np.int64)
        for s in np.unique(seg[seg >= 0]):
            idx = np.flatnonzero(seg == s)
            pos[idx] = np.arange(idx.size)
        return pos

    def max_statics(self) -> int:
        seg = self.segments()
        counts = np.bincount(seg[self.static_flags], minlength=1) if self.static_flags.any() else [0]
        return int(np.max(counts))

    def extend(self, patient_id, static: bool = False) -> "SequenceLayout":
        return SequenceLayout(np.append(self.patient_ids, patient_id),
                              np.append(self.static_flags, static), np.append(self.pad_flags, False))

    def slice(self, stop: int) -> "SequenceLayout":
        return SequenceLayout(self.patient_ids[:stop], self.static_flags[:stop], self.pad_flags[:stop])


@dataclass(frozen=True)
class MaskSpec:
    layout: SequenceLayout
    window: int | None = None

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")

    @property
    def combine(self) -> str:
        return "patient_only" if self.window is None else "patient_and_window"

    @property
    def n(self) -> int:
        return len(self.layout)

    def allowed(self, rows: np.ndarray, cols: np.ndarray, seg: np.ndarray | None = None) -> np.ndarray:
        """Vectorised mask function evaluated on the grid ``rows x cols``."""
        lay = self.layout
        seg = lay.segments() if seg is None else seg
        i = np.asarray(rows)[:, None]
        j = np.asarray(cols)[None, :]
        si, sj = seg[i], seg[j]
        stat = lay.static_flags[j]
        ok = (si == sj) & (si >= 0) & ((i >= j) | stat)
        if self.window is not None:
            ok &= (np.abs(i - j) < self.window) | stat
        return ok


def patient_mask(layout: SequenceLayout) -> MaskSpec:
    layout.validate()
    return MaskSpec(layout)


def window_mask(layout: SequenceLayout, w: int) -> MaskSpec:
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    layout.validate()
    return MaskSpec(layout, int(w))


def causal_layout(n: int) -> SequenceLayout:
    return SequenceLayout(np.zeros(n, dtype=np.int64))


def round_up(x: int, multiple: int) -> int:
    return int(math.ceil(x / multiple) * multiple)


def adaptive_window(t: int, w_base: int, alpha: int, L: int, w_max: int,
                    block_size: int = DEFAULT_BLOCK_SIZE) -> int:
    """min(w_base + alpha * floor(t / L), w_max), rounded up to a block multiple."""
    if L < 1 or w_base < 1 or w_max < 1 or alpha < 0 or t < 0:
        raise ValueError("adaptive_window expects t, alpha >= 0 and w_base, L, w_max >= 1")
    w = min(w_base + alpha * (t // L), w_max)
    return round_up(w, block_size)


# -- block compilation ---------------------------------------------------
@dataclass
class BlockMask:
    """Block-sparse form of a mask.

    ``status[r, c]`` is EMPTY, FULL or PARTIAL for query block ``r`` and key
    block ``c``; partial tiles carry their explicit boolean bitmask.
    """

    n: int
    block_size: int
    status: np.ndarray
    partial: dict = field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        return self.status.shape[0]

    def block_range(self, b: int) -> tuple[int, int]:
        return b * self.block_size, min((b + 1) * self.block_size, self.n)

    def counts(self) -> dict:
        return {"empty": int(np.sum(self.status == EMPTY)), "full": int(np.sum(self.status == FULL)),
                "partial": int(np.sum(self.status == PARTIAL))}

    def tile(self, r: int, c: int) -> np.ndarray:
        r0, r1 = self.block_range(r)
        c0, c1 = self.block_range(c)
        st = self.status[r, c]
        if st == FULL:
            return np.ones((r1 - r0, c1 - c0), dtype=bool)
        if st == EMPTY:
            return np.zeros((r1 - r0, c1 - c0), dtype=bool)
        return self.partial[(r, c)]

    def row_plan(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        """Key indices of the non-empty tiles in query block ``r`` and their sub-mask."""
        cols = [c for c in range(self.n_blocks) if self.status[r, c] != EMPTY]
        if not cols:
            r0, r1 = self.block_range(r)
            return np.zeros(0, dtype=np.int64), np.zeros((r1 - r0, 0), dtype=bool)
        keys = np.concatenate([np.arange(*self.block_range(c)) for c in cols])
        sub = np.concatenate([self.tile(r, c) for c in cols], axis=1)
        return keys, sub

    def allowed_count(self) -> int:
        total = 0
        for (r, c), st in np.ndenumerate(self.status):
            if st == FULL:
                r0, r1 = self.block_range(r)
                c0, c1 = self.block_range(c)
                total += (r1 - r0) * (c1 - c0)
        return total + int(sum(int(m.sum()) for m in self.partial.values()))


def compile_block_mask(spec: MaskSpec, block_size: int = DEFAULT_BLOCK_SIZE) -> BlockMask:
    """Classify tiles, only evaluating entries of tiles that cheap bounds can't settle."""
    if block_size < 1:
        raise ValueError("block size must be >= 1")
    lay = spec.layout
    n = len(lay)
    nb = math.ceil(n / block_size) if n else 0
    seg = lay.segments()
    status = np.full((nb, nb), EMPTY, dtype=np.int8)
    partial = {}

    # per-block summaries
    lo_seg, hi_seg, has_static, all_real = [], [], [], []
    for b in range(nb):
        s = seg[b * block_size:min((b + 1) * block_size, n)]
        real = s[s >= 0]
        lo_seg.append(real.min() if real.size else -1)
        hi_seg.append(real.max() if real.size else -1)
        has_static.append(bool(lay.static_flags[b * block_size:(b + 1) * block_size].any()))
        all_real.append(bool(real.size == s.size))

    for r in range(nb):
        r0, r1 = r * block_size, min((r + 1) * block_size, n)
        if hi_seg[r] < 0:
            continue
        for c in range(nb):
            c0, c1 = c * block_size, min((c + 1) * block_size, n)
            if hi_seg[c] < 0 or hi_seg[c] < lo_seg[r] or lo_seg[c] > hi_seg[r]:
                continue
            if not has_static[c]:
                if c0 > r1 - 1:
                    continue  # strictly future keys
                if spec.window is not None and r0 - (c1 - 1) >= spec.window:
                    continue  # every key outside the window
            tile = spec.allowed(np.arange(r0, r1), np.arange(c0, c1), seg)
            if tile.all():
                status[r, c] = FULL
            elif tile.any():
                status[r, c] = PARTIAL
                partial[(r, c)] = tile
    return BlockMask(n, block_size, status, partial)


def materialize(mask, n: int | None = None) -> np.ndarray:
    """Dense boolean ``n x n`` matrix for a MaskSpec or BlockMask."""
    if isinstance(mask, BlockMask):
        if n is not None and n != mask.n:
            raise ValueError(f"requested n={n} but mask covers {mask.n} positions")
        out = np.zeros((mask.n, mask.n), dtype=bool)
        for (r, c), st in np.ndenumerate(mask.status):
            if st != EMPTY:
                r0, r1 = mask.block_range(r)
                c0, c1 = mask.block_range(c)
                out[r0:r1, c0:c1] = mask.tile(r, c)
        return out
    if n is not None and n != mask.n:
        raise ValueError(f"requested n={n} but layout has {mask.n} positions")
    idx = np.arange(mask.n)
    return mask.allowed(idx, idx)


# -- export --------------------------------------------------------------
def mask_to_pgm(dense: np.ndarray) -> bytes:
    """Binary graymap (P5, maxval 255): allowed=255, blocked=0."""
    h, w = dense.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + (np.asarray(dense, dtype=bool).astype(np.uint8) * 255).tobytes()


def pgm_to_mask(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not a P5 graymap with maxval 255")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w) == 255


def mask_to_csv(dense: np.ndarray) -> str:
    return "".join(",".join("1" if v else "0" for v in row) + "\n" for row in np.asarray(dense, dtype=bool))


def export_mask(dense: np.ndarray, pgm_path=None, csv_path=None) -> None:
    if pgm_path is not None:
        atomic_write_bytes(Path(pgm_path), mask_to_pgm(dense))
    if csv_path is not None:
        atomic_write_text(Path(csv_path), mask_to_csv(dense))
