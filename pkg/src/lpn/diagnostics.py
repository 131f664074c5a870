"""Gradient checks against a float64 finite-difference reference.

The analytic side is the float32 model's reverse-mode gradient; the numeric
side runs central differences on a float64 copy of the same weights.
"""
from __future__ import annotations

import copy
from typing import Optional, Sequence

import torch

from .model import LPN, PairBatch
from .nncore import GradcheckReport, gradcheck
from .search import batched_loglik


def latent_gradcheck(
    model: LPN, batch: PairBatch, z: torch.Tensor, num_coords: int = 16, seed: int = 0, **tol
) -> GradcheckReport:
    """d/dz of the summed specification log-likelihood (T tasks, latents (T, d))."""
    ref = copy.deepcopy(model).double()
    return gradcheck(
        lambda zz: batched_loglik(model, batch, zz).sum(),
        z,
        num_coords=num_coords,
        seed=seed,
        numeric_fn=lambda zz: batched_loglik(ref, batch, zz).sum(),
        **tol,
    )


def parameter_gradcheck(
    model: LPN,
    batch: PairBatch,
    z: torch.Tensor,
    names: Optional[Sequence[str]] = None,
    num_coords: int = 4,
    seed: int = 0,
    **tol,
) -> dict[str, GradcheckReport]:
    """Spot-check d loglik / d parameter for a few named decoder parameters."""
    ref = copy.deepcopy(model).double()
    params = dict(model.named_parameters())
    ref_params = dict(ref.named_parameters())
    if names is None:
        weights = [n for n in params if n.startswith("decoder.") and n.endswith("weight")]
        names = weights[:: max(1, len(weights) // 6)]
    z64 = z.detach().double()
    out = {}
    for name in names:
        p64 = ref_params[name]
        orig = p64.detach().clone()

        def f64(w, p64=p64):
            with torch.no_grad():
                p64.copy_(w)
            return batched_loglik(ref, batch, z64).sum()

        (g,) = torch.autograd.grad(batched_loglik(model, batch, z.detach()).sum(), params[name])
        out[name] = gradcheck(f64, params[name], analytic_grad=g, num_coords=num_coords, seed=seed,
                              numeric_fn=f64, **tol)
        with torch.no_grad():
            p64.copy_(orig)
    return out
