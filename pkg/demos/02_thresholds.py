"""
Self-adjusting confidence thresholds
====================================

How the global and per-class thresholds react to a stream of teacher
predictions.
"""

# %%
import numpy as np

from otmatch.thresholds import init_state, local_thresholds, mask, update_state

rng = np.random.default_rng(1)
state = init_state(3, momentum=0.99)
print("start: tau =", state.tau, "local =", local_thresholds(state))

# %%
# Feed batches where the teacher grows more confident over time and
# favours class 0. The global threshold follows mean confidence; classes
# that the teacher rarely predicts get a lower bar.
for t in range(1, 1001):
    sharp = 0.3 + 3 * t / 1000
    logits = rng.normal(size=(28, 3)) * sharp + np.array([0.8, 0.0, -0.4]) * sharp
    q = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    state = update_state(state, q)
    if t in (1, 10, 100, 1000):
        print(f"t={t:<5} tau={state.tau:.3f} local={np.round(local_thresholds(state), 3)}")

# %%
# The mask keeps only predictions above their class's threshold.
passed = mask(q, local_thresholds(state))
print(f"\nlast batch: {passed.sum()} of {len(q)} samples pass")
