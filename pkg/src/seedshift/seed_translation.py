"""Gradient-based translation of a diffusion seed toward a target domain.

The seed obtained by inverting the source image is optimized so that a full
guided DDIM sample from it lands in the target domain (mean-latent
appearance pull) while keeping the source's Sobel structure in the decoded
image. Gradients are backpropagated through the entire sampling chain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import torch

from .backends import DenoiserBackend
from .config import TranslationConfig
from .diffusion import Latent, LatentTrajectory, sample
from .errors import OptimizationError
from .losses import DomainSpec, sobel, st_appearance_loss, st_structure_loss


@dataclass
class SeedTranslationResult:
    translated_seed: Latent
    loss_history: list[tuple[int, float, float]]  # (iteration, app, str); length n_st
    generation_trajectory: LatentTrajectory


def seed_translate(
    seed: Latent,
    src_image: torch.Tensor,
    domain: DomainSpec,
    backend: DenoiserBackend,
    config: TranslationConfig,
) -> SeedTranslationResult:
    """Optimize the seed for n_st Adam iterations.

    Each iteration runs a full DDIM sample conditioned on the target domain,
    decodes the clean latent, and takes one gradient step on the seed against
    lambda_app_st * appearance + lambda_str_st * structure. Only the seed is
    updated; the backend and domain spec are read-only. n_st = 0 returns the
    input seed unchanged (the generation trajectory is still recorded).

    Raises:
        OptimizationError: if the loss or gradient turns non-finite.
    """
    src_grad = sobel(torch.as_tensor(src_image)).detach()
    seed_hat = seed.values.detach().clone().requires_grad_(True)
    optimizer = torch.optim.Adam([seed_hat], lr=config.lr_st)

    history: list[tuple[int, float, float]] = []
    for i in range(config.n_st):
        optimizer.zero_grad()
        clean, _ = sample(Latent(seed_hat, seed.timestep), backend, domain.condition, config)
        gen_image = backend.codec.decode(clean.values)
        app = st_appearance_loss(domain.mean_latent, clean.values)
        strl = st_structure_loss(src_grad, gen_image)
        loss = config.lambda_app_st * app + config.lambda_str_st * strl
        if not torch.isfinite(loss):
            raise OptimizationError("seed-translation loss is non-finite", iteration=i)
        loss.backward()
        if not torch.isfinite(seed_hat.grad).all():
            raise OptimizationError("seed-translation gradient is non-finite", iteration=i)
        history.append((i, float(app.detach()), float(strl.detach())))
        optimizer.step()

    final_seed = Latent(seed_hat.detach().clone(), seed.timestep)
    with torch.no_grad():
        _, trajectory = sample(final_seed, backend, domain.condition, config)
    return SeedTranslationResult(
        translated_seed=final_seed, loss_history=history, generation_trajectory=trajectory
    )


def export_loss_history(
    history: list[tuple[int, float, float]], path: str, config: TranslationConfig
) -> None:
    """Write the per-iteration losses as CSV: iteration, app, str, total."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "app_loss", "str_loss", "total"])
        for i, app, strl in history:
            total = config.lambda_app_st * app + config.lambda_str_st * strl
            writer.writerow([i, repr(app), repr(strl), repr(total)])
