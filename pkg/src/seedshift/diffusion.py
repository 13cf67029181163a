"""Deterministic DDIM sampling and inversion with classifier-free guidance.

Everything here is a pure function of its inputs and differentiable end to
end, so gradients can be pushed through a whole sampling chain back to the
seed (or to condition embeddings). Latent trajectories are recorded with
explicit timestep tags and can be persisted bit-exactly.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch

if TYPE_CHECKING:
    from .backends import DenoiserBackend
    from .config import TranslationConfig

KIND_INVERSION = "inversion"
KIND_GENERATION = "generation-predicted-clean"

DEFAULT_TIMESTEPS = 1000
DEFAULT_BETA_START = 1e-4
# Calibrated so the cumulative-product alpha at the final timestep is ~0.0047.
DEFAULT_BETA_END = 0.01058
DEFAULT_DDIM_STEPS = 20


def uniform_ddim_grid(total_timesteps: int, steps: int) -> tuple[int, ...]:
    """Uniformly spaced sampling grid over 1..T, ending exactly at T."""
    if not 1 <= steps <= total_timesteps:
        raise ValueError(f"steps must be in 1..{total_timesteps}, got {steps}")
    grid = [round(total_timesteps * (i + 1) / steps) for i in range(steps)]
    if len(set(grid)) != len(grid):
        raise ValueError(f"grid of {steps} steps over 1..{total_timesteps} has duplicates")
    return tuple(grid)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative-product alpha coefficients plus the DDIM sampling grid.

    alphas[t-1] is the cumulative alpha for timestep t (t = 1..T); timestep 0
    means clean and has implicit alpha 1.
    """

    alphas: np.ndarray
    T: int
    ddim_timesteps: tuple[int, ...]

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        if alphas.shape != (self.T,):
            raise ValueError(f"alphas must have length T={self.T}, got {alphas.shape}")
        if not np.all((alphas > 0) & (alphas <= 1)):
            raise ValueError("alphas must lie in (0, 1]")
        if np.any(np.diff(alphas) > 0):
            raise ValueError("alphas must be non-increasing in t")
        ts = tuple(int(t) for t in self.ddim_timesteps)
        object.__setattr__(self, "ddim_timesteps", ts)
        if len(set(ts)) != len(ts) or list(ts) != sorted(ts):
            raise ValueError("ddim_timesteps must be strictly increasing with no duplicates")
        if ts and (ts[0] < 1 or ts[-1] > self.T):
            raise ValueError("ddim_timesteps must be a subsequence of 1..T")

    @classmethod
    def linear_beta(
        cls,
        total_timesteps: int = DEFAULT_TIMESTEPS,
        beta_start: float = DEFAULT_BETA_START,
        beta_end: float = DEFAULT_BETA_END,
        ddim_steps: int = DEFAULT_DDIM_STEPS,
    ) -> "DiffusionSchedule":
        betas = np.linspace(beta_start, beta_end, total_timesteps, dtype=np.float64)
        alphas = np.cumprod(1.0 - betas)
        grid = uniform_ddim_grid(total_timesteps, ddim_steps)
        return cls(alphas=alphas, T=total_timesteps, ddim_timesteps=grid)

    def alpha(self, t: int) -> float:
        """Cumulative alpha at timestep t; alpha(0) = 1 (clean)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 0..{self.T}")
        return float(self.alphas[t - 1])

    def with_ddim_steps(self, steps: int) -> "DiffusionSchedule":
        return DiffusionSchedule(
            alphas=self.alphas, T=self.T, ddim_timesteps=uniform_ddim_grid(self.T, steps)
        )

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.alphas, dtype=np.float64).tobytes())
        h.update(np.asarray(self.ddim_timesteps, dtype=np.int64).tobytes())
        h.update(str(self.T).encode())
        return h.hexdigest()[:16]


@dataclass
class Latent:
    """A latent array tagged with the timestep it lives at (0 = clean)."""

    values: torch.Tensor
    timestep: int

    def __post_init__(self):
        if not isinstance(self.values, torch.Tensor):
            self.values = torch.as_tensor(self.values)
        if self.timestep < 0:
            raise ValueError(f"timestep must be >= 0, got {self.timestep}")
        if not bool(torch.isfinite(self.values).all()):
            raise FloatingPointError(f"latent at t={self.timestep} has non-finite entries")

    @property
    def shape(self) -> torch.Size:
        return self.values.shape

    def detach(self) -> "Latent":
        return Latent(self.values.detach(), self.timestep)


@dataclass
class Condition:
    """Condition embedding handed to the denoiser; opaque to this module."""

    embedding: torch.Tensor
    label: str = ""


@dataclass
class LatentTrajectory:
    """Latents recorded over a sampling or inversion run, timesteps descending.

    kind = "inversion" stores the raw noisy latents z_t at every grid point
    (endpoints included); kind = "generation-predicted-clean" stores the clean
    prediction made at each step, tagged with the step it was predicted at.
    """

    entries: list[Latent]
    kind: str

    def __post_init__(self):
        if self.kind not in (KIND_INVERSION, KIND_GENERATION):
            raise ValueError(f"unknown trajectory kind: {self.kind!r}")
        ts = [e.timestep for e in self.entries]
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"trajectory timesteps must be strictly decreasing, got {ts}")

    def __len__(self) -> int:
        return len(self.entries)

    def timesteps(self) -> list[int]:
        return [e.timestep for e in self.entries]

    def at(self, t: int) -> Latent:
        for e in self.entries:
            if e.timestep == t:
                return e
        raise KeyError(f"no trajectory entry at t={t}")

    def save(self, path: str, schedule: DiffusionSchedule, condition_label: str = "") -> None:
        """Write a named-array archive plus a text metadata sidecar."""
        arrays = {f"z_{e.timestep:04d}": e.values.detach().cpu().numpy() for e in self.entries}
        arrays["timesteps"] = np.asarray(self.timesteps(), dtype=np.int64)
        np.savez(path, **arrays)
        with open(_sidecar_path(path), "w") as f:
            f.write(f"kind={self.kind}\n")
            f.write(f"schedule_hash={schedule.hash()}\n")
            f.write(f"condition_label={condition_label}\n")

    @classmethod
    def load(cls, path: str) -> tuple["LatentTrajectory", dict[str, str]]:
        with np.load(_npz_path(path)) as data:
            ts = [int(t) for t in data["timesteps"]]
            entries = [Latent(torch.from_numpy(data[f"z_{t:04d}"]), t) for t in ts]
        meta: dict[str, str] = {}
        with open(_sidecar_path(path)) as f:
            for line in f:
                if "=" in line:
                    k, v = line.rstrip("\n").split("=", 1)
                    meta[k] = v
        return cls(entries=entries, kind=meta["kind"]), meta


def _npz_path(path: str) -> str:
    return path if path.endswith(".npz") else path + ".npz"


def _sidecar_path(path: str) -> str:
    base, _ = os.path.splitext(_npz_path(path))
    return base + ".meta.txt"


def cfg_noise(eps_null: torch.Tensor, eps_cond: torch.Tensor, omega: float) -> torch.Tensor:
    """Classifier-free guidance: eps_null + omega * (eps_cond - eps_null)."""
    if eps_null.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_null.shape)} vs {tuple(eps_cond.shape)}")
    if omega < 0:
        raise ValueError(f"guidance scale must be >= 0, got {omega}")
    return eps_null + omega * (eps_cond - eps_null)


def predict_clean(
    z_t: torch.Tensor, eps: torch.Tensor, schedule: DiffusionSchedule, t: int
) -> torch.Tensor:
    """Clean-latent prediction (z_t - sqrt(1-a_t) * eps) / sqrt(a_t)."""
    a_t = schedule.alpha(t)
    out = (z_t - (1.0 - a_t) ** 0.5 * eps) / a_t**0.5
    if not bool(torch.isfinite(out.detach()).all()):
        raise FloatingPointError(f"predict_clean produced non-finite values at t={t}")
    return out


def ddim_step_sample(
    z_t: torch.Tensor, eps: torch.Tensor, schedule: DiffusionSchedule, t: int, t_prev: int
) -> torch.Tensor:
    """One deterministic DDIM step down the grid (t -> t_prev, t_prev may be 0)."""
    _check_grid_pair(schedule, low=t_prev, high=t, movable_low=True)
    a_prev = schedule.alpha(t_prev)
    return a_prev**0.5 * predict_clean(z_t, eps, schedule, t) + (1.0 - a_prev) ** 0.5 * eps


def ddim_step_invert(
    z_t: torch.Tensor, eps: torch.Tensor, schedule: DiffusionSchedule, t: int, t_next: int
) -> torch.Tensor:
    """One deterministic DDIM inversion step up the grid (t -> t_next)."""
    _check_grid_pair(schedule, low=t, high=t_next, movable_low=True)
    a_next = schedule.alpha(t_next)
    return a_next**0.5 * predict_clean(z_t, eps, schedule, t) + (1.0 - a_next) ** 0.5 * eps


def _check_grid_pair(schedule: DiffusionSchedule, low: int, high: int, movable_low: bool) -> None:
    if low >= high:
        raise ValueError(f"expected lower timestep < higher, got {low} >= {high}")
    grid = set(schedule.ddim_timesteps)
    if high not in grid:
        raise ValueError(f"timestep {high} not on the ddim grid")
    if low != 0 and low not in grid:
        raise ValueError(f"timestep {low} not on the ddim grid (and not 0)")


def _guided_eps(
    backend: "DenoiserBackend",
    z: torch.Tensor,
    t: int,
    cond: Condition,
    omega: float,
    null_cond: Condition | None = None,
) -> torch.Tensor:
    null = null_cond if null_cond is not None else backend.null_condition
    eps_null = backend.predict_noise(z, t, null)
    eps_cond = backend.predict_noise(z, t, cond)
    return cfg_noise(eps_null, eps_cond, omega)


def sample(
    seed: Latent,
    backend: "DenoiserBackend",
    cond: Condition,
    config: "TranslationConfig",
) -> tuple[Latent, LatentTrajectory]:
    """Run guided DDIM sampling from a seed down to the clean latent.

    Records the clean prediction made at every step (tagged with the step it
    was predicted at, final latent tagged 0). Differentiable with respect to
    the seed values and the condition embeddings; with config.grad_checkpoint
    the per-step forward is recomputed during backward to bound memory.

    Returns:
        (clean latent tagged 0, generation-predicted-clean trajectory)
    """
    schedule = backend.schedule.with_ddim_steps(config.ddim_steps)
    grid = schedule.ddim_timesteps
    if seed.timestep != grid[-1]:
        raise ValueError(f"seed timestep {seed.timestep} != top of ddim grid {grid[-1]}")

    omega = config.omega
    null = backend.null_condition
    z = seed.values
    recorded: list[Latent] = []

    use_ckpt = config.grad_checkpoint and torch.is_grad_enabled() and (
        z.requires_grad or cond.embedding.requires_grad
    )

    for i in range(len(grid) - 1, -1, -1):
        t = grid[i]
        t_prev = grid[i - 1] if i > 0 else 0

        def step(z_in, cond_emb, null_emb, t=t, t_prev=t_prev):
            eps = _guided_eps(
                backend, z_in, t, Condition(cond_emb, cond.label), omega,
                null_cond=Condition(null_emb, null.label),
            )
            return predict_clean(z_in, eps, schedule, t), ddim_step_sample(
                z_in, eps, schedule, t, t_prev
            )

        if use_ckpt:
            pred0, z = torch.utils.checkpoint.checkpoint(
                step, z, cond.embedding, null.embedding, use_reentrant=False
            )
        else:
            pred0, z = step(z, cond.embedding, null.embedding)
        recorded.append(Latent(pred0, t))

    recorded.append(Latent(z, 0))
    return Latent(z, 0), LatentTrajectory(entries=recorded, kind=KIND_GENERATION)


def invert(
    z_0: Latent,
    backend: "DenoiserBackend",
    cond: Condition,
    config: "TranslationConfig",
) -> tuple[Latent, LatentTrajectory]:
    """Run DDIM inversion from a clean latent up to the seed.

    Guidance is fixed to omega = 1 during inversion (large scales break the
    inversion direction); the condition itself is still applied. Each step is
    optionally refined to its fixed point (config.invert_refine_iters passes
    that re-estimate the noise at the predicted endpoint), which makes the
    step the exact inverse of the corresponding sampling step in the limit.
    Records every intermediate latent including both endpoints.

    Returns:
        (seed latent tagged with the top grid timestep, inversion trajectory)
    """
    if z_0.timestep != 0:
        raise ValueError(f"inversion input must be tagged timestep 0, got {z_0.timestep}")
    schedule = backend.schedule.with_ddim_steps(config.ddim_steps)
    grid = schedule.ddim_timesteps

    z = z_0.values
    recorded = [Latent(z, 0)]
    for i in range(len(grid)):
        t = grid[i - 1] if i > 0 else 0
        t_next = grid[i]
        eps = _guided_eps(backend, z, t, cond, omega=1.0)
        z_next = ddim_step_invert(z, eps, schedule, t, t_next)
        for _ in range(config.invert_refine_iters):
            eps = _guided_eps(backend, z_next, t_next, cond, omega=1.0)
            z_next = ddim_step_invert(z, eps, schedule, t, t_next)
        z = z_next
        recorded.append(Latent(z, t_next))

    recorded.reverse()
    return Latent(z, grid[-1]), LatentTrajectory(entries=recorded, kind=KIND_INVERSION)
