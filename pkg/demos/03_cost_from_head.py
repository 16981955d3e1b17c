"""
A class-to-class cost learned from the classifier
=================================================

The cost between two classes is one minus the cosine between their head
columns. Similar classes become cheap to confuse.
"""

# %%
import numpy as np

from otmatch.cost import (
    CostMatrix,
    ema_update_cost,
    expected_cost_C,
    gradient_score_U,
    hierarchical_cluster,
    init_discrete,
    validate_metric,
)

labels = ["cat", "dog", "car", "truck"]
rng = np.random.default_rng(3)
animal, vehicle = rng.normal(size=8), rng.normal(size=8)
head = np.column_stack([animal + 0.3 * rng.normal(size=8) for _ in range(2)]
                       + [vehicle + 0.3 * rng.normal(size=8) for _ in range(2)])

# %%
# Start from the 0/1 cost and smooth towards the head geometry.
cost = init_discrete(4, momentum=0.99)
for _ in range(500):
    cost = ema_update_cost(cost, head)
print(np.round(cost.C, 3))
print("metric check:", validate_metric(cost).summary())

# %%
# Average-linkage clustering recovers the two groups.
tree = hierarchical_cluster(cost, labels)
for r, (_, _, height, _) in enumerate(tree.merges):
    names = [labels[i] for i in tree.members(tree.num_leaves + r)]
    print(f"merge at {height:.3f}: {names}")

# %%
# With unit-norm head columns, how far one gradient step on class k moves
# a feature along w_k equals the expected cost of the prediction.
V = head / np.linalg.norm(head, axis=0)
x = rng.normal(size=8)
exact = CostMatrix(1 - V.T @ V)
print("\nU(x) =", gradient_score_U(x, V, 0), " C(x) =", expected_cost_C(x, V, exact, 0))
