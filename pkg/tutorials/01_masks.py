"""Build the attention mask for two packed patients and look at its block structure.

Run with ``python tutorials/01_masks.py``.
"""

import numpy as np

from clinseq import SequenceLayout, compile_block_mask, materialize, patient_mask, window_mask

# Two patients packed into one sequence. Patient 0 has 2 static tokens and
# 8 event tokens, patient 1 has 1 static and 9 events; 2 padding slots close
# the row so its length is a multiple of the block size.
patient_ids = np.array([0] * 10 + [1] * 10 + [-1] * 2)
static_flags = np.zeros(22, dtype=bool)
static_flags[[0, 1, 10]] = True
pad_flags = patient_ids < 0
layout = SequenceLayout(patient_ids, static_flags, pad_flags)

full = materialize(patient_mask(layout))
windowed = materialize(window_mask(layout, 4))

print("patient-aware mask (1 = query row may attend key column):")
for row in full.astype(int):
    print("".join(map(str, row)))

print("\nwith a sliding window of 4 (statics stay visible):")
for row in windowed.astype(int):
    print("".join(map(str, row)))

# Each patient's positions restart at zero, so rotary offsets never cross
# patients.
print("\npositions:", layout.positions().tolist())

blocks = compile_block_mask(window_mask(layout, 4), block_size=4)
print("\ntile classes:", blocks.counts())
print("allowed entries:", int(windowed.sum()), "of", windowed.size)
