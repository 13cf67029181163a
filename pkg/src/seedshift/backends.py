"""Noise-prediction backends and their latent codecs.

Two backends are provided: an analytic one with the closed-form optimal
denoiser for an isotropic Gaussian data distribution (used as a ground-truth
oracle), and a small trainable convolutional model over the procedural
two-domain scenes. Both are immutable after construction and safe to share
across concurrent read-only callers.
"""

from __future__ import annotations

import hashlib
import math
import os

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import Condition, DiffusionSchedule, Latent
from .errors import TrainingError
from .toydata import ToyScene

TOY_ARCHITECTURE_ID = "toy-conv-v1"
ANALYTIC_BACKEND_ID = "analytic-gaussian-v1"

_CODEC_TRAIN_STEPS = 400
_CODEC_LR = 2e-2
_DENOISER_LR = 2e-3
_NULL_DROP_PROB = 0.1


class LatentCodec:
    """Encoder/decoder pair between image space and latent space."""

    def encode(self, image: torch.Tensor) -> Latent:
        raise NotImplementedError

    def decode(self, values: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class IdentityCodec(LatentCodec):
    """Image space is latent space; exact round trip."""

    def encode(self, image: torch.Tensor) -> Latent:
        return Latent(torch.as_tensor(image), 0)

    def decode(self, values: torch.Tensor) -> torch.Tensor:
        return values


class DenoiserBackend:
    """Base interface: a noise predictor plus codec over a fixed schedule."""

    backend_id: str
    schedule: DiffusionSchedule
    latent_shape: tuple[int, ...]
    condition_shape: tuple[int, ...]
    codec: LatentCodec

    @property
    def null_condition(self) -> Condition:
        raise NotImplementedError

    def predict_noise(
        self,
        z: torch.Tensor,
        t: int,
        cond: Condition,
        spatial_cond: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Predicted noise for latent values z at timestep t under cond.

        spatial_cond is a declared extension point for spatially-conditioned
        backends; neither bundled backend implements it.
        """
        raise NotImplementedError

    def condition_for(self, label: str) -> Condition:
        raise NotImplementedError

    def weights_hash(self) -> str:
        raise NotImplementedError


class AnalyticGaussianBackend(DenoiserBackend):
    """Closed-form optimal denoiser for data ~ N(mu, sigma^2 I).

    The posterior mean of the clean latent given x_t is
        m(x_t) = (sqrt(a_t) sigma^2 x_t + (1 - a_t) mu) / (a_t sigma^2 + 1 - a_t)
    and the implied noise prediction simplifies to
        eps(x_t) = sqrt(1 - a_t) (x_t - sqrt(a_t) mu) / (a_t sigma^2 + 1 - a_t),
    which is the continuous extension of (x_t - sqrt(a_t) m) / sqrt(1 - a_t)
    and stays finite at a_t = 1 whenever sigma > 0. Conditions are ignored.
    """

    backend_id = ANALYTIC_BACKEND_ID

    def __init__(self, mu: torch.Tensor, sigma: float, schedule: DiffusionSchedule):
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        self.mu = torch.as_tensor(mu, dtype=torch.float64)
        self.sigma = float(sigma)
        self.schedule = schedule
        self.latent_shape = tuple(self.mu.shape)
        self.condition_shape = (1,)
        self.codec = IdentityCodec()

    @property
    def null_condition(self) -> Condition:
        return Condition(embedding=torch.zeros(1), label="")

    def condition_for(self, label: str) -> Condition:
        return Condition(embedding=torch.zeros(1), label=label)

    def predict_noise(
        self,
        z: torch.Tensor,
        t: int,
        cond: Condition,
        spatial_cond: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if spatial_cond is not None:
            raise NotImplementedError("spatial conditioning is not implemented by this backend")
        a = self.schedule.alpha(t)
        denom = a * self.sigma**2 + 1.0 - a
        if denom == 0.0:
            raise ValueError(f"alpha={a} with sigma=0 makes the optimal denoiser singular (t={t})")
        mu = self.mu.to(dtype=z.dtype)
        return math.sqrt(1.0 - a) * (z - math.sqrt(a) * mu) / denom

    def posterior_mean(self, z: torch.Tensor, t: int) -> torch.Tensor:
        a = self.schedule.alpha(t)
        denom = a * self.sigma**2 + 1.0 - a
        if denom == 0.0:
            raise ValueError(f"alpha={a} with sigma=0 makes the posterior singular (t={t})")
        mu = self.mu.to(dtype=z.dtype)
        return (math.sqrt(a) * self.sigma**2 * z + (1.0 - a) * mu) / denom

    def marginal_sample(self, t: int, n: int, generator: torch.Generator) -> torch.Tensor:
        """Draw n exact samples of x_t (leading batch dimension)."""
        a = self.schedule.alpha(t)
        std = math.sqrt(a * self.sigma**2 + 1.0 - a)
        noise = torch.randn((n, *self.latent_shape), generator=generator, dtype=torch.float64)
        return math.sqrt(a) * self.mu + std * noise

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.mu.numpy().tobytes())
        h.update(str(self.sigma).encode())
        h.update(self.schedule.hash().encode())
        return h.hexdigest()[:16]


def analytic_gaussian_backend(
    mu: torch.Tensor, sigma: float, schedule: DiffusionSchedule
) -> AnalyticGaussianBackend:
    return AnalyticGaussianBackend(mu, sigma, schedule)


def _timestep_features(t: torch.Tensor, dim: int = 32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype))
    ang = t[:, None] * freqs[None, :] / 1000.0
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class _FiLMBlock(nn.Module):
    def __init__(self, hidden: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * hidden)

    def forward(self, h, emb):
        scale, shift = self.film(emb).chunk(2, dim=-1)
        x = F.silu(self.conv1(h))
        x = x * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        x = F.silu(self.conv2(x))
        return h + x


class ToyDenoiser(nn.Module):
    """Small FiLM-conditioned convnet predicting noise on 4-channel latents."""

    def __init__(self, channels: int = 4, hidden: int = 64, cond_dim: int = 32, blocks: int = 3):
        super().__init__()
        self.cond_dim = cond_dim
        self.in_conv = nn.Conv2d(channels, hidden, 3, padding=1)
        self.blocks = nn.ModuleList(_FiLMBlock(hidden, hidden) for _ in range(blocks))
        self.out_conv = nn.Conv2d(hidden, channels, 3, padding=1)
        self.t_mlp = nn.Sequential(nn.Linear(32, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.c_mlp = nn.Linear(cond_dim, hidden)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond_emb: torch.Tensor) -> torch.Tensor:
        # z: (B, C, S, S); t: (B,); cond_emb: (B, cond_dim)
        emb = self.t_mlp(_timestep_features(t.to(z.dtype))) + self.c_mlp(cond_emb)
        h = self.in_conv(z)
        for block in self.blocks:
            h = block(h, emb)
        return self.out_conv(h)


class ToyCodec(nn.Module, LatentCodec):
    """Fixed 4x average-pool / bilinear-upsample pair with learned channel
    projections (3 -> C and back) and per-channel latent standardization."""

    def __init__(self, channels: int = 4, factor: int = 4):
        super().__init__()
        self.factor = factor
        self.proj_in = nn.Conv2d(3, channels, 1)
        self.proj_out = nn.Conv2d(channels, 3, 1)
        self.register_buffer("lat_mean", torch.zeros(channels))
        self.register_buffer("lat_std", torch.ones(channels))

    def _encode_raw(self, image: torch.Tensor) -> torch.Tensor:
        # (..., X, X, 3) -> (..., S, S, C), channels-last at the interface
        batched = image.dim() == 4
        x = image if batched else image[None]
        x = x.permute(0, 3, 1, 2)
        x = F.avg_pool2d(x, self.factor)
        x = self.proj_in(x)
        x = x.permute(0, 2, 3, 1)
        return x if batched else x[0]

    def encode(self, image: torch.Tensor) -> Latent:
        with torch.no_grad():
            raw = self._encode_raw(torch.as_tensor(image, dtype=self.lat_mean.dtype))
            z = (raw - self.lat_mean) / self.lat_std
        return Latent(z, 0)

    def decode(self, values: torch.Tensor) -> torch.Tensor:
        batched = values.dim() == 4
        z = values if batched else values[None]
        z = z * self.lat_std + self.lat_mean
        z = z.permute(0, 3, 1, 2)
        z = self.proj_out(z)
        z = F.interpolate(z, scale_factor=self.factor, mode="bilinear", align_corners=False)
        x = z.permute(0, 2, 3, 1)
        return x if batched else x[0]


class ToyBackend(DenoiserBackend):
    """Trainable desk-scale backend over the procedural scenes."""

    backend_id = TOY_ARCHITECTURE_ID

    def __init__(
        self,
        net: ToyDenoiser,
        codec: ToyCodec,
        embeddings: dict[str, torch.Tensor],
        schedule: DiffusionSchedule,
        image_size: int,
        rng_seed: int,
        epochs: int,
    ):
        self.net = net
        self.codec = codec
        self.embeddings = embeddings  # label -> (cond_dim,); "" is the null embedding
        self.schedule = schedule
        self.image_size = image_size
        self.rng_seed = rng_seed
        self.epochs = epochs
        s = image_size // codec.factor
        channels = codec.lat_mean.numel()
        self.latent_shape = (s, s, channels)
        self.condition_shape = (net.cond_dim,)
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        for p in self.codec.parameters():
            p.requires_grad_(False)

    @property
    def null_condition(self) -> Condition:
        return self.condition_for("")

    def condition_for(self, label: str) -> Condition:
        if label not in self.embeddings:
            raise KeyError(f"no condition embedding for label {label!r}; have {sorted(self.embeddings)}")
        return Condition(embedding=self.embeddings[label].detach().clone(), label=label)

    def predict_noise(
        self,
        z: torch.Tensor,
        t: int,
        cond: Condition,
        spatial_cond: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if spatial_cond is not None:
            raise NotImplementedError("spatial conditioning is not implemented by this backend")
        if tuple(cond.embedding.shape) != self.condition_shape:
            raise ValueError(
                f"condition shape {tuple(cond.embedding.shape)} != declared {self.condition_shape}"
            )
        batched = z.dim() == 4
        zb = z if batched else z[None]
        zb = zb.permute(0, 3, 1, 2)
        tb = torch.full((zb.shape[0],), float(t), dtype=zb.dtype)
        emb = cond.embedding.to(zb.dtype)[None].expand(zb.shape[0], -1)
        out = self.net(zb, tb, emb).permute(0, 2, 3, 1)
        return out if batched else out[0]

    def to_dtype(self, dtype: torch.dtype) -> "ToyBackend":
        self.net.to(dtype)
        self.codec.to(dtype)
        self.embeddings = {k: v.to(dtype) for k, v in self.embeddings.items()}
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for key, val in self.net.state_dict().items():
            arrays[f"net.{key}"] = val.detach().cpu().numpy()
        for key, val in self.codec.state_dict().items():
            arrays[f"codec.{key}"] = val.detach().cpu().numpy()
        for label, emb in self.embeddings.items():
            arrays[f"cond.{label}"] = emb.detach().cpu().numpy()
        return arrays

    def weights_hash(self) -> str:
        arrays = self.state_arrays()
        h = hashlib.sha256()
        for key in sorted(arrays):
            h.update(key.encode())
            h.update(arrays[key].tobytes())
        return h.hexdigest()[:16]


def _scenes_to_tensor(dataset: list[ToyScene]) -> torch.Tensor:
    return torch.stack([torch.from_numpy(np.asarray(s.image, dtype=np.float32)) for s in dataset])


def _train_codec(codec: ToyCodec, images: torch.Tensor) -> None:
    # the projections are 1x1 channel maps; a small subset carries enough signal
    if images.shape[0] > 24:
        idx = torch.randperm(images.shape[0], generator=torch.Generator().manual_seed(0))[:24]
        fit_images = images[idx]
    else:
        fit_images = images
    params = list(codec.proj_in.parameters()) + list(codec.proj_out.parameters())
    opt = torch.optim.Adam(params, lr=_CODEC_LR)
    for _ in range(_CODEC_TRAIN_STEPS):
        opt.zero_grad()
        recon = codec.decode(codec._encode_raw(fit_images))
        loss = F.mse_loss(recon, fit_images)
        loss.backward()
        opt.step()
    # standardize latents so diffusion operates near unit scale
    with torch.no_grad():
        raw = codec._encode_raw(images)
        codec.lat_mean.copy_(raw.mean(dim=(0, 1, 2)))
        codec.lat_std.copy_(raw.std(dim=(0, 1, 2)).clamp_min(1e-6))


def train_toy_backend(
    dataset: list[ToyScene],
    epochs: int,
    rng_seed: int,
    schedule: DiffusionSchedule | None = None,
    batch_size: int = 16,
) -> ToyBackend:
    """Train the toy backend on encoded scene latents.

    The codec projections are always fitted (they are infrastructure, not the
    denoiser); `epochs` counts full passes of denoiser training, so epochs=0
    returns an initialized-but-untrained noise predictor. Deterministic for a
    fixed rng_seed.

    Raises:
        TrainingError: if the denoising loss turns non-finite.
    """
    domains = sorted({s.domain for s in dataset})
    if len(domains) < 2:
        raise ValueError(f"dataset must cover both domains, got {domains}")
    if schedule is None:
        schedule = DiffusionSchedule.linear_beta()

    torch.manual_seed(rng_seed)
    images = _scenes_to_tensor(dataset)
    image_size = images.shape[1]

    codec = ToyCodec()
    _train_codec(codec, images)

    net = ToyDenoiser()
    n_params = sum(p.numel() for p in net.parameters())
    assert n_params <= 1_000_000, f"toy denoiser too large: {n_params} params"

    cond_dim = net.cond_dim
    emb_table = nn.Parameter(0.1 * torch.randn(len(domains) + 1, cond_dim))
    label_index = {"": 0, **{d: i + 1 for i, d in enumerate(domains)}}

    with torch.no_grad():
        latents = torch.stack([codec.encode(img).values for img in images])
    domain_idx = torch.tensor([label_index[s.domain] for s in dataset])

    alphas = torch.from_numpy(schedule.alphas.copy()).to(torch.float32)
    opt = torch.optim.Adam(list(net.parameters()) + [emb_table], lr=_DENOISER_LR)
    gen = torch.Generator().manual_seed(rng_seed)

    net.train()
    n = len(dataset)
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            z0 = latents[idx].permute(0, 3, 1, 2)
            t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            a = alphas[t - 1][:, None, None, None]
            z_t = a.sqrt() * z0 + (1.0 - a).sqrt() * eps

            cond_idx = domain_idx[idx].clone()
            drop = torch.rand(len(idx), generator=gen) < _NULL_DROP_PROB
            cond_idx[drop] = 0

            opt.zero_grad()
            pred = net(z_t, t.to(torch.float32), emb_table[cond_idx])
            loss = F.mse_loss(pred, eps)
            if not torch.isfinite(loss):
                raise TrainingError("denoising loss diverged", epoch=epoch)
            loss.backward()
            opt.step()

    embeddings = {label: emb_table[i].detach().clone() for label, i in label_index.items()}
    return ToyBackend(
        net=net, codec=codec, embeddings=embeddings, schedule=schedule,
        image_size=image_size, rng_seed=rng_seed, epochs=epochs,
    )


def denoising_loss(backend: ToyBackend, scenes: list[ToyScene], rng_seed: int = 0) -> float:
    """Mean denoising MSE over scenes at fixed noise draws (evaluation aid)."""
    gen = torch.Generator().manual_seed(rng_seed)
    images = _scenes_to_tensor(scenes)
    with torch.no_grad():
        z0 = torch.stack([backend.codec.encode(img).values for img in images]).permute(0, 3, 1, 2)
        t = torch.randint(1, backend.schedule.T + 1, (z0.shape[0],), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        a = torch.tensor(
            [backend.schedule.alpha(int(ti)) for ti in t], dtype=z0.dtype
        )[:, None, None, None]
        z_t = a.sqrt() * z0 + (1.0 - a).sqrt() * eps
        emb = torch.stack([backend.embeddings[s.domain] for s in scenes])
        pred = backend.net(z_t, t.to(z0.dtype), emb)
        return float(F.mse_loss(pred, eps))


def save_backend(backend: ToyBackend, path: str) -> None:
    """Persist toy backend weights as a named-array archive with sidecar.

    The exact schedule (alphas and default ddim grid) rides along in the
    archive so a load reconstructs the backend bit-for-bit.
    """
    arrays = backend.state_arrays()
    arrays["schedule.alphas"] = np.asarray(backend.schedule.alphas, dtype=np.float64)
    arrays["schedule.ddim_timesteps"] = np.asarray(backend.schedule.ddim_timesteps, dtype=np.int64)
    np.savez(path, **arrays)
    base, _ = os.path.splitext(path if path.endswith(".npz") else path + ".npz")
    with open(base + ".meta.txt", "w") as f:
        f.write(f"architecture={backend.backend_id}\n")
        f.write(f"rng_seed={backend.rng_seed}\n")
        f.write(f"epochs={backend.epochs}\n")
        f.write(f"image_size={backend.image_size}\n")
        f.write(f"schedule_timesteps={backend.schedule.T}\n")
        f.write(f"schedule_hash={backend.schedule.hash()}\n")


def load_backend(path: str, schedule: DiffusionSchedule | None = None) -> ToyBackend:
    npz_path = path if path.endswith(".npz") else path + ".npz"
    base, _ = os.path.splitext(npz_path)
    meta: dict[str, str] = {}
    with open(base + ".meta.txt") as f:
        for line in f:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                meta[k] = v
    if meta.get("architecture") != TOY_ARCHITECTURE_ID:
        raise ValueError(f"unsupported backend archive: {meta.get('architecture')!r}")

    with np.load(npz_path) as data:
        net_state = {k[len("net."):]: torch.from_numpy(data[k]) for k in data.files if k.startswith("net.")}
        codec_state = {k[len("codec."):]: torch.from_numpy(data[k]) for k in data.files if k.startswith("codec.")}
        embeddings = {
            k[len("cond."):]: torch.from_numpy(data[k]) for k in data.files if k.startswith("cond.")
        }
        if schedule is None:
            schedule = DiffusionSchedule(
                alphas=data["schedule.alphas"],
                T=int(meta["schedule_timesteps"]),
                ddim_timesteps=tuple(int(t) for t in data["schedule.ddim_timesteps"]),
            )
    net = ToyDenoiser()
    net.load_state_dict(net_state)
    codec = ToyCodec()
    codec.load_state_dict(codec_state)
    return ToyBackend(
        net=net, codec=codec, embeddings=embeddings, schedule=schedule,
        image_size=int(meta["image_size"]), rng_seed=int(meta["rng_seed"]),
        epochs=int(meta["epochs"]),
    )
