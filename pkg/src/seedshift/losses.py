"""Loss functions and domain statistics for seed and trajectory optimization.

All losses are sums (not means) of squares, matching the squared-norm
notation they implement; the lambda weights in TranslationConfig absorb
scale. Everything is differentiable torch and stateless.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backends import LatentCodec
from .config import HistogramConfig
from .diffusion import Condition, Latent

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = torch.tensor([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])

ETA_MODE_MEAN_ABS_DIFF = "mean-abs-diff"
ETA_MODE_UNIFORM = "uniform-fallback"


@dataclass
class DomainSpec:
    """Everything describing a target domain for translation."""

    label: str
    condition: Condition
    example_latents: list[Latent]
    mean_latent: Latent
    eta: torch.Tensor  # (C,), nonnegative, sums to 1
    eta_mode: str = ETA_MODE_MEAN_ABS_DIFF

    def __post_init__(self):
        stacked = torch.stack([ex.values for ex in self.example_latents])
        if not torch.allclose(stacked.mean(dim=0), self.mean_latent.values, atol=1e-5):
            raise ValueError("mean_latent is not the elementwise mean of example_latents")
        if torch.any(self.eta < 0) or abs(float(self.eta.sum()) - 1.0) > 1e-9:
            raise ValueError("eta must be nonnegative and sum to 1")


def sobel(image: torch.Tensor) -> torch.Tensor:
    """Horizontal/vertical Sobel responses of the luminance, shape (X, X, 2).

    Luminance uses fixed RGB weights; borders are replicate-padded so the
    output matches the input resolution.
    """
    img = torch.as_tensor(image)
    if img.dim() != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (X, X, 3) image, got {tuple(img.shape)}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype)
    luma = (img * w).sum(dim=-1)
    x = F.pad(luma[None, None], (1, 1, 1, 1), mode="replicate")
    kernels = torch.stack([_SOBEL_X, _SOBEL_Y]).to(img.dtype)[:, None]
    resp = F.conv2d(x, kernels)
    return resp[0].permute(1, 2, 0)


def st_structure_loss(src_grad: torch.Tensor, gen_image: torch.Tensor) -> torch.Tensor:
    """Squared distance between source Sobel field and sobel(gen_image)."""
    gen_grad = sobel(gen_image)
    if src_grad.shape != gen_grad.shape:
        raise ValueError(f"gradient shape mismatch: {tuple(src_grad.shape)} vs {tuple(gen_grad.shape)}")
    return ((src_grad - gen_grad) ** 2).sum()


def st_appearance_loss(mean_latent: Latent, gen_latent: torch.Tensor) -> torch.Tensor:
    """Squared distance to the target domain's mean latent."""
    target = mean_latent.values
    gen = gen_latent.values if isinstance(gen_latent, Latent) else gen_latent
    if target.shape != gen.shape:
        raise ValueError(f"latent shape mismatch: {tuple(target.shape)} vs {tuple(gen.shape)}")
    return ((target - gen) ** 2).sum()


def to_structure_loss(z_star: Latent, z_inv: Latent) -> torch.Tensor:
    """Squared distance between an optimized latent and its inversion twin."""
    if z_star.timestep != z_inv.timestep:
        raise ValueError(f"timestep mismatch: {z_star.timestep} vs {z_inv.timestep}")
    if z_star.values.shape != z_inv.values.shape:
        raise ValueError(
            f"latent shape mismatch: {tuple(z_star.values.shape)} vs {tuple(z_inv.values.shape)}"
        )
    return ((z_star.values - z_inv.values) ** 2).sum()


def soft_histogram(
    values: torch.Tensor,
    bins: int = 64,
    value_range: tuple[float, float] = (-4.0, 4.0),
    bandwidth: float | None = None,
) -> torch.Tensor:
    """Differentiable histogram mass over equal-width bins.

    Each sample spreads a unit of mass across bins with a Gaussian kernel,
    normalized per sample (a softmax over bins of the negative squared
    distance to bin centers), so the output always sums to 1 and is smooth
    in the input values.
    """
    v = torch.as_tensor(values).reshape(-1)
    if v.numel() == 0:
        raise ValueError("soft_histogram needs at least one value")
    lo, hi = value_range
    if hi <= lo:
        raise ValueError(f"invalid range: ({lo}, {hi})")
    if bandwidth is None:
        bandwidth = (hi - lo) / bins
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    centers = lo + (hi - lo) * (torch.arange(bins, dtype=v.dtype) + 0.5) / bins
    d = (v[:, None] - centers[None, :]) / bandwidth
    per_sample = torch.softmax(-0.5 * d * d, dim=1)
    return per_sample.mean(dim=0)


def to_appearance_loss(
    pred_clean_star: Latent,
    pred_clean_gen: Latent,
    eta: torch.Tensor,
    hist_cfg: HistogramConfig | None = None,
) -> torch.Tensor:
    """Channel-weighted squared distance between per-channel soft histograms."""
    a = pred_clean_star.values if isinstance(pred_clean_star, Latent) else pred_clean_star
    b = pred_clean_gen.values if isinstance(pred_clean_gen, Latent) else pred_clean_gen
    if a.shape != b.shape:
        raise ValueError(f"latent shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    cfg = hist_cfg or HistogramConfig()
    channels = a.shape[-1]
    if eta.numel() != channels:
        raise ValueError(f"eta has {eta.numel()} entries for {channels} channels")
    total = a.new_zeros(())
    for i in range(channels):
        ha = soft_histogram(a[..., i], cfg.bins, (cfg.lo, cfg.hi), cfg.resolved_bandwidth())
        hb = soft_histogram(b[..., i], cfg.bins, (cfg.lo, cfg.hi), cfg.resolved_bandwidth())
        total = total + eta[i] * ((ha - hb) ** 2).sum()
    return total


def compute_eta(source_examples: list[Latent], target_examples: list[Latent]) -> torch.Tensor:
    """Per-channel weights from the absolute gap in channel means.

    This is a stand-in statistic for channel sensitivity to the domain gap:
    raw_i = |mean over target of channel i - mean over source|, normalized to
    sum to 1, with a uniform fallback when the domains have equal means.
    """
    if not source_examples or not target_examples:
        raise ValueError("both example sets must be non-empty")
    src = torch.stack([ex.values for ex in source_examples]).to(torch.float64)
    tgt = torch.stack([ex.values for ex in target_examples]).to(torch.float64)
    channels = src.shape[-1]
    src_means = src.reshape(-1, channels).mean(dim=0)
    tgt_means = tgt.reshape(-1, channels).mean(dim=0)
    raw = (tgt_means - src_means).abs()
    total = raw.sum()
    if float(total) < 1e-12:
        return torch.full((channels,), 1.0 / channels, dtype=torch.float64)
    eta = raw / total
    # renormalize exactly; the DomainSpec invariant is 1e-9 tight
    return eta / eta.sum()


def build_domain_spec(
    label: str,
    condition: Condition,
    example_images: list,
    codec: LatentCodec,
    source_examples: list,
) -> DomainSpec:
    """Encode target examples, compute the mean latent and eta weights."""
    if not example_images:
        raise ValueError("example_images must be non-empty")
    target_latents = [codec.encode(torch.as_tensor(np.asarray(img))) for img in example_images]
    source_latents = [codec.encode(torch.as_tensor(np.asarray(img))) for img in source_examples]
    mean = torch.stack([ex.values for ex in target_latents]).mean(dim=0)
    eta = compute_eta(source_latents, target_latents)
    mode = ETA_MODE_UNIFORM if bool((eta == eta[0]).all()) else ETA_MODE_MEAN_ABS_DIFF
    return DomainSpec(
        label=label,
        condition=condition,
        example_latents=target_latents,
        mean_latent=Latent(mean, 0),
        eta=eta,
        eta_mode=mode,
    )


def save_domain_spec(spec: DomainSpec, path: str) -> None:
    arrays = {
        f"example_{i:03d}": ex.values.detach().cpu().numpy()
        for i, ex in enumerate(spec.example_latents)
    }
    arrays["mean"] = spec.mean_latent.values.detach().cpu().numpy()
    arrays["eta"] = spec.eta.detach().cpu().numpy()
    arrays["condition"] = spec.condition.embedding.detach().cpu().numpy()
    np.savez(path, **arrays)
    base, _ = os.path.splitext(path if path.endswith(".npz") else path + ".npz")
    with open(base + ".meta.txt", "w") as f:
        f.write(f"label={spec.label}\n")
        f.write(f"n={len(spec.example_latents)}\n")
        f.write(f"eta_mode={spec.eta_mode}\n")


def load_domain_spec(path: str) -> DomainSpec:
    npz_path = path if path.endswith(".npz") else path + ".npz"
    base, _ = os.path.splitext(npz_path)
    meta: dict[str, str] = {}
    with open(base + ".meta.txt") as f:
        for line in f:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                meta[k] = v
    with np.load(npz_path) as data:
        n = int(meta["n"])
        examples = [Latent(torch.from_numpy(data[f"example_{i:03d}"]), 0) for i in range(n)]
        mean = Latent(torch.from_numpy(data["mean"]), 0)
        eta = torch.from_numpy(data["eta"])
        cond = Condition(embedding=torch.from_numpy(data["condition"]), label=meta["label"])
    return DomainSpec(
        label=meta["label"], condition=cond, example_latents=examples,
        mean_latent=mean, eta=eta, eta_mode=meta["eta_mode"],
    )
