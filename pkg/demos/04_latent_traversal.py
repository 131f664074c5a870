# %% [markdown]
# # Drawing a two-dimensional latent space
#
# With a 2-d latent we can decode a regular grid of latents and look at all
# the programs side by side. Grid points sit at the centres of equal
# probability cells of the standard normal prior, so the picture covers the
# region the prior actually uses rather than a fixed box.
#
#     python demos/04_latent_traversal.py runs/demo-tiny/latest.ckpt traversal

# %%
import sys
from collections import Counter
from pathlib import Path

from lpn.eval import latent_traversal
from lpn.persistence import load_checkpoint

ckpt = sys.argv[1] if len(sys.argv) > 1 else "runs/demo-tiny/latest.ckpt"
out = Path(sys.argv[2] if len(sys.argv) > 2 else "traversal")
model, _, meta = load_checkpoint(ckpt)
model.eval()
print(f"step {meta.get('step')}, latent dim {model.cfg.latent_dim}")

# %% [markdown]
# The marker input has a single coloured pixel in the top-left corner, so every
# decoded output shows the full pattern the latent stands for.

# %%
tr = latent_traversal(model, resolution=12)
out.with_suffix(".ppm").write_bytes(tr.to_ppm())
print("wrote", out.with_suffix(".ppm"))

# %% [markdown]
# ## How many distinct programs?
#
# A well-trained tiny model covers many of the possible 2x2 patterns, and
# neighbouring latents tend to decode to related patterns.

# %%
seen = Counter(str(g.cells.tolist()) for row in tr.tiles for g in row)
print(f"{len(seen)} distinct outputs across {12 * 12} latents")
for cells, count in seen.most_common(5):
    print(count, cells)
