"""
Semi-supervised two moons with four labels
==========================================

Train with and without the transport loss and compare test accuracy.
A full 20,000-step run takes roughly 20 s; this demo uses a shorter run.
"""

# %%
from otmatch.config import TrainConfig
from otmatch.cost import hierarchical_cluster
from otmatch.trainer import train

steps = 5000

# %%
# lam is the weight of the transport loss; lam = 0 turns it off.
for lam in (0.0, 0.5):
    cfg = TrainConfig(lam=lam, total_steps=steps, eval_interval=1000)
    state, rows = train(cfg, checkpoint=False)
    curve = [f"{r.eval_acc:.3f}" for r in rows if r.eval_acc is not None]
    print(f"lam={lam}: teacher test accuracy by 1000 steps: {', '.join(curve)}")
    print(f"   final mask rate {rows[-1].mask_rate:.2f}, global threshold {rows[-1].tau_global:.3f}")

# %%
# The cost learned in the lam = 0.5 run (two classes, so a single merge).
print(hierarchical_cluster(state.cost).to_json())
