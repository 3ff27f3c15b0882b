"""Train a small model on a synthetic cohort and evaluate it on held-out patients.

Run with ``python tutorials/02_train_and_evaluate.py`` (about ten seconds).
"""

import numpy as np

from clinseq import (CohortSpec, ModelConfig, OptimConfig, Tokenizer, TrainConfig, evaluate, generate_cohort,
                     pack_batches, train)
from clinseq.evaluation import collect_records
from clinseq.metrics import report_table
from clinseq.training import unigram_entropy

# Every patient's stream depends only on the seed and the patient index, so
# one large cohort can be split into training and held-out halves.
everyone = generate_cohort(CohortSpec(n_patients=100, rho=0.95, seed=0))
train_set, held_out = everyone[:50], everyone[50:]

# Decile cutpoints are fitted on the training patients only.
tokenizer = Tokenizer.fit(train_set)
print("vocabulary size:", len(tokenizer.vocab))
print("first patient, first tokens:", [tokenizer.vocab.name(i) for i in tokenizer.encode(train_set[0])[:12]])

batches = pack_batches(train_set, 256, tokenizer)
model_cfg = ModelConfig(vocab_size=len(tokenizer.vocab), seed=0)
state = train(batches, model_cfg, OptimConfig(), TrainConfig(steps=200, seed=0))

losses = [h["loss"] for h in state.history]
print(f"unigram entropy  {unigram_entropy(batches):.3f} nats")
print(f"first 10 steps   {np.mean(losses[:10]):.3f} nats")
print(f"last 50 steps    {np.mean(losses[-50:]):.3f} nats")

records = collect_records(state.params, model_cfg, tokenizer, held_out, 256, state.step)
print(f"\n{len(records)} held-out quantile predictions")
print(report_table(evaluate(records)))
