import numpy as np
import pytest

from clinseq.datagen import CohortSpec, generate_cohort, pack_batches
from clinseq.masking import SequenceLayout
from clinseq.model import ModelConfig, init_params
from clinseq.tokenizer import Tokenizer


def make_layout(lengths, statics=None, pad=0):
    """Packed layout: consecutive patients of the given lengths, statics first."""
    statics = statics or [0] * len(lengths)
    pid, sflag = [], []
    for p, (n, s) in enumerate(zip(lengths, statics)):
        pid += [p] * n
        sflag += [True] * s + [False] * (n - s)
    n = sum(lengths)
    return SequenceLayout(np.array(pid + [-1] * pad), np.array(sflag + [False] * pad),
                          np.array([False] * n + [True] * pad))


def random_layout(rng, n_max=128, n_patients=None, max_statics=3, allow_pad=True):
    k = n_patients or int(rng.integers(1, 5))
    n = int(rng.integers(k * 4, n_max + 1))
    pad = int(rng.integers(0, n // 4)) if allow_pad else 0
    cuts = np.sort(rng.choice(np.arange(1, n - pad), size=k - 1, replace=False)) if k > 1 else []
    lengths = np.diff(np.concatenate([[0], cuts, [n - pad]])).astype(int).tolist()
    statics = [int(rng.integers(0, min(max_statics, L) + 1)) for L in lengths]
    return make_layout(lengths, statics, pad)


@pytest.fixture(scope="session")
def cohort():
    return generate_cohort(CohortSpec(n_patients=12, events_min=8, events_max=16, seed=3))


@pytest.fixture(scope="session")
def tokenizer(cohort):
    return Tokenizer.fit(cohort)


@pytest.fixture(scope="session")
def batches(cohort, tokenizer):
    return pack_batches(cohort, 64, tokenizer)


@pytest.fixture()
def tiny_model():
    cfg = ModelConfig(vocab_size=12, n_layers=2, d_model=16, n_heads=2, w_base=8, alpha=8,
                      window_interval=10, w_max=32, block_size=4, max_len=256)
    return cfg, init_params(cfg)


def roughen(params, seed=0, std=0.3):
    """Move every parameter away from its (nearly linear) init so tests exercise curvature."""
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.data = t.data + rng.normal(0.0, std, t.data.shape)
    return params


def disjoint_tokens(layout, vocab_size, rng, pad_id=0):
    """Token ids drawn from a separate id range for every patient (pad id for padding)."""
    seg = layout.segments()
    k = int(seg.max()) + 1
    width = (vocab_size - 1) // k
    ids = np.full(len(layout), pad_id, dtype=np.int64)
    for p in range(k):
        where = seg == p
        ids[where] = 1 + p * width + rng.integers(0, width, int(where.sum()))
    return ids


# -- acceptance reporting -----------------------------------------------
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n:2d}: {title} ({detail})")
