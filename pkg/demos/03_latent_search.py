# %% [markdown]
# # Searching the latent space at test time
#
# Given a checkpoint, this walks through what happens for a single task: the
# encoder proposes one latent per specification pair, their average seeds the
# search, and gradient ascent on the specification log-likelihood moves it.
#
#     python demos/03_latent_search.py runs/demo-tiny/latest.ckpt

# %%
import sys
from dataclasses import replace

import numpy as np
import torch

from lpn.eval import evaluate_task
from lpn.model import encode_pair, generate
from lpn.persistence import load_checkpoint
from lpn.search import ARC_SEARCH, latent_optimize, parse_infer
from lpn.taskgen import default_family_config, generate_tasks

path = sys.argv[1] if len(sys.argv) > 1 else "runs/demo-tiny/latest.ckpt"
model, _, meta = load_checkpoint(path)
model.eval()
tc = meta.get("train_config", {})
family = tc.get("family", "tiny-pattern")
print(f"loaded {path}: step {meta.get('step')}, family {family}, latent dim {model.cfg.latent_dim}")

fam = default_family_config(family, **tc.get("family_overrides", {}))
task = generate_tasks(family, fam, master_seed=424242, count=1)[0]

# %% [markdown]
# ## Per-pair posteriors
#
# Each pair alone gives a Gaussian guess. Pairs that pin down more of the
# pattern tend to have smaller variance.

# %%
posts = [encode_pair(model, x, y) for x, y in task.pairs]
for k, p in enumerate(posts):
    print(f"pair {k}: |mean| {np.linalg.norm(p.mean):6.3f}   mean std {np.exp(0.5 * p.log_var).mean():.3f}")
z0 = np.mean([p.mean for p in posts], axis=0)

# %% [markdown]
# ## Gradient ascent trajectory

# %%
rep = latent_optimize(model, task.pairs, z0, parse_infer("ga:30"))
for step, best in enumerate(rep.running_best()):
    if step % 5 == 0 or step == len(rep.running_best()) - 1:
        print(f"step {step:3d}: best log-likelihood {best:9.3f}")

# %% [markdown]
# ## Adam with cosine decay
#
# The ARC configuration uses Adam from step size 1.0, which moves much further
# per step. On small models plain ascent is usually enough.

# %%
adam = latent_optimize(model, task.pairs, z0, replace(ARC_SEARCH, steps=30))
print(f"plain GA best {rep.best_loglik:.3f}   Adam best {adam.best_loglik:.3f}")

# %% [markdown]
# ## Random search for comparison
#
# Sampling latents from the prior ignores the gradient entirely.

# %%
rs = latent_optimize(model, task.pairs, z0, parse_infer("rs:250"), torch.Generator().manual_seed(0))
print(f"random search best {rs.best_loglik:.3f} after {rs.steps_taken} samples")

# %% [markdown]
# ## Decoding the query

# %%
x, y = task.query[0]
for name, z in (("mean", z0), ("GA 30", rep.best_latent), ("RS 250", rs.best_latent)):
    pred = generate(model, x, z)
    print(f"{name:>7}: exact {pred == y}")
res = evaluate_task(model, task, parse_infer("ga:30"), attempts=2)
print("solved at top-1:", res.solved(1), " top-2:", res.solved(2))
