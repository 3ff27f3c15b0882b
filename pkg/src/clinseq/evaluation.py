"""Turn model predictions on tokenized timelines into metric records."""

from __future__ import annotations

import numpy as np

from .datagen import pack_sequences
from .metrics import EvalRecord, make_record
from .model import ModelConfig, forward
from .tokenizer import N_BINS, Tokenizer, decode_token


def collect_records(params, cfg: ModelConfig, tokenizer: Tokenizer, timelines, max_len: int,
                    step: int = 0) -> list[EvalRecord]:
    """One record per quantile token that the model had to predict.

    Timelines are encoded, truncated to ``max_len`` at event boundaries and
    packed; each quantile target yields the model's distribution restricted
    to ``Q1..Q10`` together with the raw value and the reconstruction of the
    argmax bin.
    """
    vocab = tokenizer.vocab
    encoded = [tokenizer.encode_annotated(tl) for tl in timelines]
    batches = pack_sequences([ids for ids, _ in encoded], max_len, vocab)
    q_ids = vocab.quantile_ids
    records = []
    for b in batches:
        logits = forward(b.token_ids, b.layout, cfg, params, step).data
        seg = b.layout.segments()
        for k, src in enumerate(b.sources):
            tl = timelines[src]
            start = int(np.flatnonzero(seg == k)[0])
            length = int(np.sum(seg == k))
            for pos, event_idx in encoded[src][1]:
                if pos >= length or pos == 0:
                    continue
                z = logits[start + pos - 1, q_ids]
                p = np.exp(z - z.max())
                p /= p.sum()
                event = tl.events[event_idx]
                binner = tokenizer.binners[event.variable]
                true_level = int(vocab.name(int(b.token_ids[start + pos]))[1:])
                pred_level = int(np.argmax(p)) + 1
                records.append(make_record(true_level, p, event.value, decode_token(binner, pred_level)))
    return records


def quantile_accuracy(params, cfg: ModelConfig, batches, vocab, step: int = 0) -> tuple[float, float]:
    """(model accuracy, marginal baseline accuracy) on next-quantile-token prediction.

    The baseline always predicts the most frequent quantile token among the
    evaluated targets, i.e. the best context-free guess.
    """
    q_ids = vocab.quantile_ids
    is_q = np.isin(np.arange(len(vocab)), q_ids)
    hits = total = 0
    targets = []
    for b in batches:
        logits = forward(b.token_ids, b.layout, cfg, params, step).data
        seg = b.layout.segments()
        for i in range(len(b) - 1):
            t = int(b.token_ids[i + 1])
            if not is_q[t] or seg[i] < 0 or seg[i] != seg[i + 1]:
                continue
            pred = int(q_ids[np.argmax(logits[i, q_ids])])
            hits += pred == t
            total += 1
            targets.append(t)
    counts = np.bincount(targets, minlength=len(vocab))
    return hits / total, counts.max() / total


__all__ = ["collect_records", "quantile_accuracy", "N_BINS"]
