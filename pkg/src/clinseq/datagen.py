"""Synthetic patient cohorts and sequence packing.

Each patient carries a latent severity that follows a stationary AR(1)
process over its events; every continuous measurement is an affine function
of the current severity plus noise.  With a high autoregressive coefficient
the next measurement's decile is predictable from recent ones, which gives
a small model something real to learn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masking import SequenceLayout
from .tokenizer import Event, PatientTimeline, Tokenizer, Vocabulary


class CohortError(ValueError):
    pass


class PackingError(ValueError):
    pass


AGE_BANDS = ("18-39", "40-59", "60-79", "80+")


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 50
    events_min: int = 20
    events_max: int = 40
    n_variables: int = 4
    rho: float = 0.95
    noise: float = 0.1
    gap_mu: float = 3.0  # log-minutes
    gap_sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise CohortError("n_patients must be >= 1")
        if not 1 <= self.events_min <= self.events_max:
            raise CohortError("need 1 <= events_min <= events_max")
        if self.n_variables < 1:
            raise CohortError("n_variables must be >= 1")
        if not 0 < self.rho < 1:
            raise CohortError("rho must lie in (0, 1)")
        if self.noise <= 0 or self.gap_sigma <= 0:
            raise CohortError("noise and gap_sigma must be positive")


def variable_names(n: int) -> list[str]:
    return [f"var{i:02d}" for i in range(n)]


def _variable_coefficients(spec: CohortSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 0])
    slope = rng.uniform(1.5, 3.0, spec.n_variables) * rng.choice([-1.0, 1.0], spec.n_variables)
    offset = rng.uniform(4.0, 10.0, spec.n_variables)
    return slope, offset


def generate_cohort(spec: CohortSpec) -> list[PatientTimeline]:
    """Deterministic cohort; patient ``i`` uses its own seed derived from ``spec.seed``."""
    names = variable_names(spec.n_variables)
    slope, offset = _variable_coefficients(spec)
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_patients)
    innovation = np.sqrt(1.0 - spec.rho**2)
    out = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        band = int(rng.integers(len(AGE_BANDS)))
        statics = [f"age={AGE_BANDS[band]}"]
        if rng.random() < 0.5:
            statics.append(f"sex={'F' if rng.random() < 0.5 else 'M'}")
        n_events = int(rng.integers(spec.events_min, spec.events_max + 1))
        level = 0.4 * (band - 1.5)  # older bands run slightly more severe
        s = level + rng.normal()
        t = 0.0
        events = []
        for k in range(n_events):
            if k:
                t += float(np.round(rng.lognormal(spec.gap_mu, spec.gap_sigma)))
                s = level + spec.rho * (s - level) + innovation * rng.normal()
            v = int(rng.integers(spec.n_variables))
            value = offset[v] + slope[v] * s + spec.noise * rng.normal()
            events.append(Event(t, names[v], float(np.round(value, 6))))
        out.append(PatientTimeline(f"P{i:05d}", statics, events))
    return out


# -- packing -------------------------------------------------------------
@dataclass
class PackedBatch:
    token_ids: np.ndarray
    layout: SequenceLayout
    sources: list  # index of each packed sequence in the input list

    def __len__(self):
        return int(self.token_ids.shape[0])


def group_starts(ids, vocab: Vocabulary) -> list[int]:
    """Positions where an event group (interval? event quantile?) starts, plus len(ids)."""
    cats = [vocab.category(int(t)) for t in ids]
    starts = []
    for i, c in enumerate(cats):
        if c == "time_interval" or (c == "event" and (i == 0 or cats[i - 1] != "time_interval")):
            starts.append(i)
    starts.append(len(ids))
    return starts


def truncate_sequence(ids, max_len: int, vocab: Vocabulary) -> np.ndarray:
    """Longest prefix of at most ``max_len`` tokens that ends on a group boundary."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size <= max_len:
        return ids
    cut = max(b for b in [0] + group_starts(ids, vocab) if b <= max_len)
    n_static = int(vocab.is_static(ids).sum())
    if cut < n_static:
        raise PackingError(f"max_len {max_len} cannot hold the {n_static} static tokens of a timeline")
    return ids[:cut]


def pack_sequences(sequences, max_len: int, vocab: Vocabulary) -> list[PackedBatch]:
    """First-fit-decreasing packing of token sequences into PAD-filled rows."""
    if len(sequences) == 0:
        raise PackingError("nothing to pack")
    seqs = [truncate_sequence(s, max_len, vocab) for s in sequences]
    order = sorted(range(len(seqs)), key=lambda i: (-len(seqs[i]), i))
    bins: list[list[int]] = []
    room: list[int] = []
    for i in order:
        if len(seqs[i]) == 0:
            continue
        for b, r in enumerate(room):
            if len(seqs[i]) <= r:
                bins[b].append(i)
                room[b] -= len(seqs[i])
                break
        else:
            bins.append([i])
            room.append(max_len - len(seqs[i]))
    pad = vocab.pad_id
    batches = []
    for members in bins:
        ids = np.full(max_len, pad, dtype=np.int64)
        pid = np.full(max_len, -1, dtype=np.int64)
        static = np.zeros(max_len, dtype=bool)
        pos = 0
        for k, i in enumerate(members):
            s = seqs[i]
            ids[pos:pos + len(s)] = s
            pid[pos:pos + len(s)] = k
            static[pos:pos + len(s)] = vocab.is_static(s)
            pos += len(s)
        padf = np.zeros(max_len, dtype=bool)
        padf[pos:] = True
        batches.append(PackedBatch(ids, SequenceLayout(pid, static, padf), list(members)))
    return batches


def pack_batches(timelines, max_len: int, tokenizer: Tokenizer) -> list[PackedBatch]:
    if not timelines:
        raise PackingError("empty timeline list")
    return pack_sequences([tokenizer.encode(tl) for tl in timelines], max_len, tokenizer.vocab)
