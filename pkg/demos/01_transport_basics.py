"""
Transport between class distributions
=====================================

Three ways to move probability mass between classes, and when they agree.
"""

# %%
# A line of three classes with distance as cost. Moving everything from
# class 0 to the target costs 0.3 * 1 + 0.2 * 2.
import numpy as np

from otmatch.ot import OTConfig, closed_form_row_plan, entropic_objective, exact_ot, fast_dirac_ot, sinkhorn

C = np.array([[0.0, 1, 2], [1, 0, 1], [2, 1, 0]])
source = np.array([1.0, 0.0, 0.0])
target = np.array([0.5, 0.3, 0.2])

d_exact, plan = exact_ot(source, target, C)
print("exact LP:        ", d_exact)
print(plan.matrix)

# %%
# The source is a single class, so only one coupling exists and the
# answer is a dot product with a column of the cost. No solver needed.
print("Dirac shortcut:  ", fast_dirac_ot(0, target, C))

# %%
# Entropic smoothing with Sinkhorn. With a Dirac source the entropy term
# cannot change the plan, so the three numbers coincide.
d_sink, _ = sinkhorn(source, target, C, OTConfig(epsilon=0.01))
print("Sinkhorn eps=.01:", d_sink)

# %%
# For a spread-out source Sinkhorn is only close to the LP value, and the
# gap shrinks as epsilon does.
mu = np.array([0.2, 0.5, 0.3])
nu = np.array([0.6, 0.1, 0.3])
print("\nexact:", exact_ot(mu, nu, C)[0])
for eps in (1.0, 0.1, 0.01):
    print(f"  eps={eps:<5} sinkhorn={sinkhorn(mu, nu, C, OTConfig(eps))[0]:.6f}")

# %%
# Dropping the column constraint leaves a problem with a closed form:
# every row is a softmax of -C / eps. Random feasible plans never beat it.
rng = np.random.default_rng(0)
Crand = rng.uniform(0, 2, size=(4, 3))
eps = 0.5
best = entropic_objective(Crand, closed_form_row_plan(Crand, eps).matrix, eps)
rand = min(entropic_objective(Crand, rng.dirichlet(np.ones(3), 4) / 4, eps) for _ in range(1000))
print(f"\nclosed form {best:.5f} <= best of 1000 random plans {rand:.5f}")
