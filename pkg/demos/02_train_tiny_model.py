# %% [markdown]
# # Training a tiny model
#
# The tiny preset works on 4x4 grids with 2x2 patterns and a two-dimensional
# latent space. It is small enough to train on a laptop CPU in a few minutes at
# a reduced batch size, and its latent space can be drawn directly (see the
# traversal demo).
#
# Run from the repository root:
#
#     python demos/02_train_tiny_model.py --steps 2000 --out runs/demo-tiny

# %%
import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

import torch

from lpn.eval import evaluate_tasks, summarize
from lpn.search import parse_infer
from lpn.training import preset, train

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--batch-size", type=int, default=32)
ap.add_argument("--inner-steps", type=int, default=1, help="0 trains on mean latents")
ap.add_argument("--out", default="runs/demo-tiny")
ap.add_argument("--threads", type=int, default=None)
args = ap.parse_args()
if args.threads:
    torch.set_num_threads(args.threads)

# %% [markdown]
# ## Configuration
#
# Start from the preset and shrink the run. Everything else (learning rate,
# KL weight, clipping) stays at the preset values.

# %%
arch, cfg = preset(
    "tiny",
    steps=args.steps,
    batch_size=args.batch_size,
    micro_batch=args.batch_size,
    inner_steps=args.inner_steps,
    eval_every=max(args.steps // 4, 1),
    eval_tasks=64,
    ckpt_every=max(args.steps // 4, 1),
    log_every=50,
)
print(json.dumps({"arch": arch.to_dict(), "train": cfg.to_dict()}, indent=1))

# %% [markdown]
# ## Train
#
# Re-running the script resumes from `latest.ckpt` in the output directory.

# %%
t0 = time.time()
trainer = train(arch, cfg, Path(args.out), resume=True)
print(f"reached step {trainer.step} in {time.time() - t0:.0f}s")
if trainer.history:
    h = trainer.history
    print(f"loss {h[0].loss:.3f} -> {h[-1].loss:.3f}")

# %% [markdown]
# ## Evaluate
#
# Held-out tasks come from a separate seed. The mean latent is the encoder's
# one-shot guess; the GA rows refine it with gradient ascent before decoding.

# %%
tasks = trainer.source.eval_tasks(200)
for spec in ("mean", "ga:5", "ga:20", "rs:50"):
    s = summarize(evaluate_tasks(trainer.model, tasks, parse_infer(spec)))
    print(f"{spec:>6}: exact {100 * s['exact_top1']:5.1f}%   pixel {100 * s['pixel_accuracy']:5.1f}%")
