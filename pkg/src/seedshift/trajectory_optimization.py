"""Per-timestep null-embedding optimization along the sampling trajectory.

After seed translation, each DDIM step from the translated seed is optimized
so the evolving latent tracks the source's inversion trajectory (structure)
while the step's clean prediction keeps the target-domain histogram profile
(appearance). Only the per-step replacement for the null embedding inside
classifier-free guidance is updated; seed, backend, and both reference
trajectories stay fixed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import torch

from .backends import DenoiserBackend
from .config import INIT_NULL_TEXT, INIT_PREVIOUS_STEP, TranslationConfig
from .diffusion import (
    Condition,
    DiffusionSchedule,
    KIND_GENERATION,
    KIND_INVERSION,
    Latent,
    LatentTrajectory,
    cfg_noise,
    ddim_step_sample,
    predict_clean,
)
from .errors import OptimizationError
from .losses import DomainSpec, to_appearance_loss, to_structure_loss


@dataclass
class NullEmbeddingSchedule:
    """One optimized guidance-null embedding per sampling step (t descending)."""

    embeddings: list[Condition]
    init_mode: str

    def __post_init__(self):
        if self.init_mode not in (INIT_NULL_TEXT, INIT_PREVIOUS_STEP):
            raise ValueError(f"unknown init_mode: {self.init_mode!r}")


@dataclass
class TrajectoryOptimizationResult:
    final_latent: Latent
    optimized_embeddings: NullEmbeddingSchedule
    per_step_losses: list[tuple[int, int, float, float]]  # (t, inner_iter, app, str)
    output_image: torch.Tensor


def ddim_step_guided(
    z_t: torch.Tensor,
    t: int,
    t_prev: int,
    cond_pair: tuple[Condition, Condition],
    backend: DenoiserBackend,
    schedule: DiffusionSchedule,
    omega: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One guided DDIM step where the null branch uses an optimizable embedding.

    Returns (clean prediction at t, latent advanced to t_prev), both under the
    same guided noise estimate.
    """
    c_tau, c_phi = cond_pair
    eps_phi = backend.predict_noise(z_t, t, c_phi)
    eps_tau = backend.predict_noise(z_t, t, c_tau)
    eps = cfg_noise(eps_phi, eps_tau, omega)
    return predict_clean(z_t, eps, schedule, t), ddim_step_sample(z_t, eps, schedule, t, t_prev)


def _check_trajectories(
    t_inv: LatentTrajectory, t_gen: LatentTrajectory, grid: tuple[int, ...]
) -> None:
    expected = sorted((0, *grid), reverse=True)
    if t_inv.kind != KIND_INVERSION:
        raise ValueError(f"t_inv must be an inversion trajectory, got kind={t_inv.kind!r}")
    if t_gen.kind != KIND_GENERATION:
        raise ValueError(f"t_gen must be a generation trajectory, got kind={t_gen.kind!r}")
    if t_inv.timesteps() != expected or t_gen.timesteps() != expected:
        raise ValueError(
            f"trajectory timesteps must match the ddim grid {expected}; "
            f"got inv={t_inv.timesteps()} gen={t_gen.timesteps()}"
        )


def trajectory_optimize(
    t_inv: LatentTrajectory,
    t_gen: LatentTrajectory,
    translated_seed: Latent,
    domain: DomainSpec,
    backend: DenoiserBackend,
    config: TranslationConfig,
) -> TrajectoryOptimizationResult:
    """Optimize one null embedding per DDIM step, top of the grid downward.

    At each timestep t, n_to Adam iterations minimize
        lambda_app_to * histogram-appearance(pred_clean, t_gen at t)
      + lambda_str_to * squared-distance(z at t_prev, t_inv at t_prev)
    over the step's null embedding only; the latent then advances once with
    the final embedding. A timestep's inner loop stops early when the loss
    improves by less than config.to_early_stop.

    Raises:
        OptimizationError: non-finite loss or gradient, tagged (t, iteration).
        ValueError: trajectory timesteps inconsistent with the ddim grid.
    """
    schedule = backend.schedule.with_ddim_steps(config.ddim_steps)
    grid = schedule.ddim_timesteps
    if translated_seed.timestep != grid[-1]:
        raise ValueError(
            f"translated seed timestep {translated_seed.timestep} != top of grid {grid[-1]}"
        )
    _check_trajectories(t_inv, t_gen, grid)

    c_tau = domain.condition
    null_emb = backend.null_condition.embedding
    carry_emb = null_emb
    z_star = translated_seed.values.detach()

    per_step: list[tuple[int, int, float, float]] = []
    optimized: list[Condition] = []

    for i in range(len(grid) - 1, -1, -1):
        t = grid[i]
        t_prev = grid[i - 1] if i > 0 else 0
        gen_ref = t_gen.at(t).detach()
        inv_ref = t_inv.at(t_prev).detach()

        init = carry_emb if config.to_init_mode == INIT_PREVIOUS_STEP else null_emb
        emb = init.detach().clone().requires_grad_(True)
        optimizer = torch.optim.Adam([emb], lr=config.lr_to)

        prev_loss: float | None = None
        for j in range(config.n_to):
            pred0, z_prev = ddim_step_guided(
                z_star, t, t_prev, (c_tau, Condition(emb)), backend, schedule, config.omega
            )
            app = to_appearance_loss(Latent(pred0, t), gen_ref, domain.eta, config.hist)
            strl = to_structure_loss(Latent(z_prev, t_prev), inv_ref)
            loss = config.lambda_app_to * app + config.lambda_str_to * strl
            if not torch.isfinite(loss):
                raise OptimizationError("trajectory loss is non-finite", iteration=j, timestep=t)
            per_step.append((t, j, float(app.detach()), float(strl.detach())))
            if (
                config.to_early_stop > 0
                and prev_loss is not None
                and prev_loss - float(loss.detach()) < config.to_early_stop
            ):
                break
            prev_loss = float(loss.detach())
            optimizer.zero_grad()
            loss.backward()
            if not torch.isfinite(emb.grad).all():
                raise OptimizationError(
                    "trajectory gradient is non-finite", iteration=j, timestep=t
                )
            optimizer.step()

        carry_emb = emb.detach()
        optimized.append(Condition(embedding=carry_emb.clone(), label=f"null-opt@{t}"))
        with torch.no_grad():
            _, z_star = ddim_step_guided(
                z_star, t, t_prev, (c_tau, Condition(carry_emb)), backend, schedule, config.omega
            )

    final = Latent(z_star, 0)
    with torch.no_grad():
        output_image = backend.codec.decode(final.values)
    return TrajectoryOptimizationResult(
        final_latent=final,
        optimized_embeddings=NullEmbeddingSchedule(optimized, init_mode=config.to_init_mode),
        per_step_losses=per_step,
        output_image=output_image,
    )


def export_step_losses(per_step: list[tuple[int, int, float, float]], path: str) -> None:
    """Write per-step inner losses as CSV: t, inner_iter, app, str."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "inner_iter", "app_loss", "str_loss"])
        for t, j, app, strl in per_step:
            writer.writerow([t, j, repr(app), repr(strl)])


def save_embedding_schedule(schedule_out: NullEmbeddingSchedule, path: str) -> None:
    """Persist optimized embeddings as a named-array archive."""
    import numpy as np

    arrays = {
        f"emb_{i:03d}": c.embedding.detach().cpu().numpy()
        for i, c in enumerate(schedule_out.embeddings)
    }
    arrays["labels"] = np.array([c.label for c in schedule_out.embeddings], dtype="U32")
    np.savez(path, **arrays)
