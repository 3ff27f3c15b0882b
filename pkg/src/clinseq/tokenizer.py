"""Decile tokenization of clinical timelines.

Continuous values become one of ten ordinal tokens ``Q1..Q10`` chosen by the
value's position among nine empirical cutpoints.  Time between consecutive
events is binned the same way into ``T1..T10`` separator tokens.  The
quantile tokens are shared across variables: the event token that precedes
a quantile token says which variable it belongs to.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .io_utils import atomic_write_bytes, atomic_write_text

N_BINS = 10
PAD, BOS = "<PAD>", "<BOS>"
STATIC_VARIABLE = "@static"
INTERVAL_KEY = "@interval"

CATEGORIES = ("special", "quantile", "time_interval", "event", "static_context")


class TokenizerError(ValueError):
    pass


class FitError(TokenizerError):
    pass


class EncodingError(TokenizerError):
    pass


class VocabularyError(TokenizerError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class CategoryError(TokenizerError):
    pass


# -- binning -------------------------------------------------------------
@dataclass(frozen=True)
class QuantileBinner:
    variable_id: str
    cutpoints: tuple[float, ...]
    bin_medians: tuple[float, ...]
    n_fit: int

    def __post_init__(self):
        if len(self.cutpoints) != N_BINS - 1 or len(self.bin_medians) != N_BINS:
            raise FitError(f"binner {self.variable_id!r} needs 9 cutpoints and 10 medians")
        if any(b < a for a, b in zip(self.cutpoints, self.cutpoints[1:])):
            raise FitError(f"binner {self.variable_id!r} has decreasing cutpoints")
        if self.n_fit < N_BINS:
            raise FitError(f"binner {self.variable_id!r} fit on fewer than {N_BINS} values")

    def bin_index(self, x: float) -> int:
        """0-based bin of ``x``: the number of cutpoints strictly below it."""
        if x is None or math.isnan(x):
            raise EncodingError(f"cannot encode NaN for variable {self.variable_id!r}")
        if math.isinf(x):
            raise EncodingError(f"cannot encode non-finite value for variable {self.variable_id!r}")
        return int(np.searchsorted(np.asarray(self.cutpoints), x, side="left"))

    def bin_range(self, k: int) -> tuple[float, float]:
        """Closed value range covered by 0-based bin ``k``."""
        lo = -math.inf if k == 0 else self.cutpoints[k - 1]
        hi = math.inf if k == N_BINS - 1 else self.cutpoints[k]
        return lo, hi

    def to_dict(self) -> dict:
        return {"cutpoints": list(self.cutpoints), "medians": list(self.bin_medians), "n_fit": self.n_fit}

    @classmethod
    def from_dict(cls, variable_id: str, d: Mapping) -> "QuantileBinner":
        return cls(variable_id, tuple(float(c) for c in d["cutpoints"]),
                   tuple(float(m) for m in d["medians"]), int(d["n_fit"]))


def fit_binner(variable_id: str, values: Iterable[float]) -> QuantileBinner:
    """Fit decile cutpoints (linear-interpolation percentiles) and bin medians."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size < N_BINS:
        raise FitError(f"variable {variable_id!r}: need at least {N_BINS} values, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise FitError(f"variable {variable_id!r}: fitting sample contains NaN or infinite values")
    cut = np.percentile(v, np.arange(10, 100, 10), method="linear")
    cut = np.maximum.accumulate(cut)  # guards against rounding in near-flat stretches
    bins = np.searchsorted(cut, v, side="left")
    medians = []
    for k in range(N_BINS):
        members = v[bins == k]
        if members.size:
            medians.append(float(np.median(members)))
        else:
            # empty bin (heavy ties): use its closed upper edge
            medians.append(float(cut[min(k, N_BINS - 2)]))
    return QuantileBinner(str(variable_id), tuple(float(c) for c in cut), tuple(medians), int(v.size))


def fit_interval_binner(gaps: Iterable[float]) -> QuantileBinner:
    """Binner over inter-event gaps in minutes; zero gaps are excluded."""
    g = np.asarray(list(gaps), dtype=np.float64)
    return fit_binner(INTERVAL_KEY, g[g > 0])


def encode_value(binner: QuantileBinner, x: float) -> int:
    """Quantile level 1..10 for ``x`` (k = 1 + #cutpoints < x)."""
    return binner.bin_index(float(x)) + 1


def decode_token(binner: QuantileBinner, token) -> float:
    """Per-bin training median for a quantile level (int 1..10 or ``"Q3"``)."""
    level = quantile_level(token)
    return binner.bin_medians[level - 1]


def quantile_level(token) -> int:
    if isinstance(token, str):
        if not (token.startswith("Q") and token[1:].isdigit()):
            raise CategoryError(f"{token!r} is not a quantile token")
        token = int(token[1:])
    if isinstance(token, (bool, np.bool_)) or not isinstance(token, (int, np.integer)) or not 1 <= token <= N_BINS:
        raise CategoryError(f"{token!r} is not a quantile token level in 1..{N_BINS}")
    return int(token)


# -- vocabulary ----------------------------------------------------------
def quantile_name(k: int) -> str:
    return f"Q{k}"


def interval_name(k: int) -> str:
    return f"T{k}"


def event_name(variable: str, value: str | None = None) -> str:
    return f"{variable}" if value is None else f"{variable}={value}"


def static_name(value: str) -> str:
    return f"static:{value}"


class Vocabulary:
    """Dense token-id space with one category per token."""

    def __init__(self, names: Sequence[str], categories: Sequence[str]):
        if len(names) != len(categories):
            raise VocabularyError("names and categories differ in length")
        if len(set(names)) != len(names):
            raise VocabularyError("duplicate token names")
        bad = set(categories) - set(CATEGORIES)
        if bad:
            raise VocabularyError(f"unknown token categories {sorted(bad)}")
        self.names = list(names)
        self.categories = list(categories)
        self._ids = {n: i for i, n in enumerate(self.names)}
        self.category_array = np.array(self.categories)

    @classmethod
    def build(cls, continuous: Iterable[str], categorical: Mapping[str, Iterable[str]] = (),
              statics: Iterable[str] = ()) -> "Vocabulary":
        names = [PAD, BOS]
        cats = ["special", "special"]
        names += [quantile_name(k) for k in range(1, N_BINS + 1)]
        cats += ["quantile"] * N_BINS
        names += [interval_name(k) for k in range(1, N_BINS + 1)]
        cats += ["time_interval"] * N_BINS
        for var in sorted(set(continuous)):
            names.append(event_name(var))
            cats.append("event")
        categorical = dict(categorical)
        for var in sorted(categorical):
            for val in sorted(set(categorical[var])):
                names.append(event_name(var, val))
                cats.append("event")
        for s in sorted(set(statics)):
            names.append(static_name(s))
            cats.append("static_context")
        return cls(names, cats)

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self._ids

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise VocabularyError(f"token {name!r} is not in the vocabulary") from None

    def name(self, token_id: int) -> str:
        return self.names[token_id]

    def category(self, token_id: int) -> str:
        return self.categories[token_id]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def quantile_ids(self) -> np.ndarray:
        return np.array([self._ids[quantile_name(k)] for k in range(1, N_BINS + 1)])

    def is_static(self, ids) -> np.ndarray:
        return self.category_array[np.asarray(ids, dtype=np.int64)] == "static_context"

    def to_json(self) -> str:
        return json.dumps({"tokens": [[n, c] for n, c in zip(self.names, self.categories)]},
                          sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        rows = json.loads(text)["tokens"]
        return cls([r[0] for r in rows], [r[1] for r in rows])

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


# -- timelines -----------------------------------------------------------
@dataclass(frozen=True)
class Event:
    timestamp: float
    variable: str
    value: float | str


@dataclass
class PatientTimeline:
    patient_id: str
    static_tokens: list[str] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)

    def __post_init__(self):
        for e in self.events:
            if not e.timestamp >= 0:
                raise TokenizerError(f"patient {self.patient_id}: negative or NaN timestamp {e.timestamp}")
        self.events = sorted(self.events, key=lambda e: (e.timestamp, e.variable))

    def gaps(self) -> list[float]:
        ts = [e.timestamp for e in self.events]
        return [b - a for a, b in zip(ts, ts[1:])]


@dataclass
class Tokenizer:
    """Fitted binners (per continuous variable plus intervals) and vocabulary."""

    binners: dict[str, QuantileBinner]
    interval_binner: QuantileBinner
    vocab: Vocabulary

    @classmethod
    def fit(cls, timelines: Sequence[PatientTimeline]) -> "Tokenizer":
        cont: dict[str, list[float]] = {}
        cat: dict[str, set[str]] = {}
        statics: set[str] = set()
        gaps: list[float] = []
        for tl in timelines:
            statics.update(tl.static_tokens)
            gaps.extend(tl.gaps())
            for e in tl.events:
                if isinstance(e.value, str):
                    cat.setdefault(e.variable, set()).add(e.value)
                else:
                    cont.setdefault(e.variable, []).append(e.value)
        clash = set(cont) & set(cat)
        if clash:
            raise FitError(f"variables with both numeric and categorical values: {sorted(clash)}")
        binners = {v: fit_binner(v, vals) for v, vals in sorted(cont.items())}
        interval = fit_interval_binner(gaps)
        vocab = Vocabulary.build(binners, cat, statics)
        return cls(binners, interval, vocab)

    def encode(self, tl: PatientTimeline) -> list[int]:
        return encode_timeline(tl, self.binners, self.vocab, self.interval_binner)

    def encode_annotated(self, tl: PatientTimeline):
        return encode_timeline(tl, self.binners, self.vocab, self.interval_binner, annotate=True)

    # binner store: {variable_id -> {cutpoints, medians, n_fit}}
    def binners_json(self) -> str:
        store = {v: b.to_dict() for v, b in self.binners.items()}
        store[INTERVAL_KEY] = self.interval_binner.to_dict()
        return json.dumps(store, sort_keys=True, indent=1)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        atomic_write_text(d / "binners.json", self.binners_json())
        atomic_write_text(d / "vocab.json", self.vocab.to_json())

    @classmethod
    def load(cls, directory) -> "Tokenizer":
        d = Path(directory)
        store = json.loads((d / "binners.json").read_text(encoding="utf-8"))
        interval = QuantileBinner.from_dict(INTERVAL_KEY, store.pop(INTERVAL_KEY))
        binners = {v: QuantileBinner.from_dict(v, b) for v, b in store.items()}
        vocab = Vocabulary.from_json((d / "vocab.json").read_text(encoding="utf-8"))
        return cls(binners, interval, vocab)


def encode_timeline(tl: PatientTimeline, binners: Mapping[str, QuantileBinner], vocab: Vocabulary,
                    interval_binner: QuantileBinner, annotate: bool = False):
    """Token ids for one timeline.

    Layout: static tokens, then for each event an interval token for the gap
    since the previous event (skipped for a zero gap), the event token, and a
    quantile token when the value is continuous.

    With ``annotate=True`` also returns ``[(position, event_index)]`` for every
    emitted quantile token.
    """
    ids = [vocab.id(static_name(s)) for s in tl.static_tokens]
    notes = []
    prev = None
    for idx, e in enumerate(tl.events):
        if prev is not None and e.timestamp - prev > 0:
            ids.append(vocab.id(interval_name(encode_value(interval_binner, e.timestamp - prev))))
        prev = e.timestamp
        if isinstance(e.value, str):
            ids.append(vocab.id(event_name(e.variable, e.value)))
            continue
        if e.variable not in binners:
            raise VocabularyError(f"no binner for continuous variable {e.variable!r}")
        ids.append(vocab.id(event_name(e.variable)))
        try:
            level = encode_value(binners[e.variable], e.value)
        except EncodingError as err:
            raise EncodingError(f"patient {tl.patient_id}, event {idx}: {err}") from None
        notes.append((len(ids), idx))
        ids.append(vocab.id(quantile_name(level)))
    return (ids, notes) if annotate else ids


# -- CSV timelines -------------------------------------------------------
TIMELINE_HEADER = ("patient_id", "timestamp_min", "variable", "value")


def _format_number(x: float) -> str:
    return repr(float(x))


def timelines_to_csv(timelines: Sequence[PatientTimeline]) -> str:
    """Serialise timelines; static tokens are rows with variable ``@static``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMELINE_HEADER)
    for tl in timelines:
        for s in tl.static_tokens:
            w.writerow([tl.patient_id, "0", STATIC_VARIABLE, s])
        for e in tl.events:
            value = e.value if isinstance(e.value, str) else _format_number(e.value)
            w.writerow([tl.patient_id, _format_number(e.timestamp), e.variable, value])
    return buf.getvalue()


def _parse_value(raw: str):
    try:
        return float(raw)
    except ValueError:
        return raw


def timelines_from_csv(text: str) -> list[PatientTimeline]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != TIMELINE_HEADER:
        raise TokenizerError(f"timeline CSV header must be {','.join(TIMELINE_HEADER)}")
    order: list[str] = []
    statics: dict[str, list[str]] = {}
    events: dict[str, list[Event]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise TokenizerError(f"line {lineno}: expected 4 fields, got {len(row)}")
        pid, ts, var, val = row
        if pid not in statics:
            order.append(pid)
            statics[pid], events[pid] = [], []
        if var == STATIC_VARIABLE:
            statics[pid].append(val)
            continue
        try:
            t = float(ts)
        except ValueError:
            raise TokenizerError(f"line {lineno}: bad timestamp {ts!r}") from None
        events[pid].append(Event(t, var, _parse_value(val)))
    return [PatientTimeline(pid, statics[pid], events[pid]) for pid in order]


def read_timelines(path) -> list[PatientTimeline]:
    return timelines_from_csv(Path(path).read_text(encoding="utf-8"))


def write_timelines(path, timelines: Sequence[PatientTimeline]) -> None:
    atomic_write_text(path, timelines_to_csv(timelines))


# -- tokenized corpus ----------------------------------------------------
def write_token_file(path, sequences: Sequence[Sequence[int]], vocab: Vocabulary) -> None:
    """Little-endian int32 ids plus a ``<path>.json`` sidecar of patient offsets."""
    flat = np.concatenate([np.asarray(s, dtype="<i4") for s in sequences]) if sequences else np.zeros(0, "<i4")
    offsets = np.concatenate([[0], np.cumsum([len(s) for s in sequences])]).astype(int).tolist()
    atomic_write_bytes(path, flat.astype("<i4").tobytes())
    sidecar = {"patient_boundaries": offsets, "vocab_hash": vocab.hash}
    atomic_write_text(str(path) + ".json", json.dumps(sidecar, sort_keys=True))


def read_token_file(path) -> tuple[list[np.ndarray], str]:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise TokenizerError(f"{path}: token file length is not a multiple of 4")
    flat = np.frombuffer(raw, dtype="<i4").astype(np.int64)
    sidecar = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    b = sidecar["patient_boundaries"]
    if b[0] != 0 or b[-1] != flat.size or any(y < x for x, y in zip(b, b[1:])):
        raise TokenizerError(f"{path}: patient boundaries do not match the token stream")
    return [flat[x:y] for x, y in zip(b, b[1:])], sidecar["vocab_hash"]
