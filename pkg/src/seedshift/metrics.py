"""Desk-scale evaluation metrics: SSIM, KID over seeded random features, and
a Sobel-gradient structure distance.

The KID feature extractor is deliberately NOT an Inception network: images
are embedded with a fixed, seeded random projection plus tanh. Absolute
metric values are therefore not comparable to published numbers computed
with pretrained extractors; only relative orderings at this scale are
meaningful. Reports repeat this caveat in their headers.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .losses import LUMA_WEIGHTS, sobel
from .toydata import load_png

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2

KID_FEATURE_DIM = 64
KID_FEATURE_SEED = 0
_EMBED_POOL_TO = 16


@dataclass
class MetricsReport:
    kid: float
    ssim: float
    grad_struct_dist: float
    n_outputs: int
    n_targets: int
    n_skipped: int


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Structural similarity on luminance, 11x11 Gaussian window (sigma 1.5).

    Computed in float64 over fully-interior windows, then averaged.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 3 or a.shape[-1] != 3:
        raise ValueError(f"expected (X, X, 3) images, got {tuple(a.shape)}")
    if min(a.shape[0], a.shape[1]) < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW} pixels on a side")

    w = torch.tensor(LUMA_WEIGHTS, dtype=torch.float64)
    la = (a * w).sum(dim=-1)[None, None]
    lb = (b * w).sum(dim=-1)[None, None]
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA, torch.float64)[None, None]

    mu_a = F.conv2d(la, win)
    mu_b = F.conv2d(lb, win)
    var_a = F.conv2d(la * la, win) - mu_a**2
    var_b = F.conv2d(lb * lb, win) - mu_b**2
    cov = F.conv2d(la * lb, win) - mu_a * mu_b

    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float((num / den).mean())


def random_feature_embed(
    images, dim: int = KID_FEATURE_DIM, seed: int = KID_FEATURE_SEED
) -> np.ndarray:
    """Fixed seeded random-projection + tanh embedding of images.

    Images are average-pooled to 16x16, centered, projected with a frozen
    Gaussian matrix, and squashed. This is the desk-scale stand-in for a
    pretrained feature extractor.
    """
    stack = torch.stack([torch.as_tensor(np.asarray(im), dtype=torch.float64) for im in images])
    if stack.dim() != 4 or stack.shape[-1] != 3:
        raise ValueError(f"expected a set of (X, X, 3) images, got {tuple(stack.shape)}")
    x = stack.permute(0, 3, 1, 2)
    factor = max(1, x.shape[-1] // _EMBED_POOL_TO)
    x = F.avg_pool2d(x, factor)
    flat = x.reshape(x.shape[0], -1).numpy() - 0.5

    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0, size=(flat.shape[1], dim)) * (4.0 / math.sqrt(flat.shape[1]))
    bias = rng.normal(0.0, 0.1, size=(dim,))
    return np.tanh(flat @ w + bias)


def kid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Unbiased squared MMD with the polynomial kernel (x.y/d + 1)^3.

    For equal sample counts the cross-diagonal-excluded U-statistic is used,
    which is exactly zero on identical sets; otherwise the standard unbiased
    estimator.
    """
    x = np.asarray(features_a, dtype=np.float64)
    y = np.asarray(features_b, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"feature sets must be 2-D with equal dims, got {x.shape} vs {y.shape}")
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValueError("each feature set needs at least 2 items")
    d = x.shape[1]

    kxx = (x @ x.T / d + 1.0) ** 3
    kyy = (y @ y.T / d + 1.0) ** 3
    kxy = (x @ y.T / d + 1.0) ** 3

    term_xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    term_yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    if n == m:
        term_xy = (kxy.sum() - np.trace(kxy)) / (n * (n - 1))
    else:
        term_xy = kxy.mean()
    return float(term_xx + term_yy - 2.0 * term_xy)


def grad_struct_dist(a: torch.Tensor, b: torch.Tensor) -> float:
    """Normalized distance between Sobel gradient fields.

    The denominator takes the larger of the two field norms so the measure
    stays bounded when one image is (near-)constant.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    ga, gb = sobel(a), sobel(b)
    num = torch.linalg.vector_norm(ga - gb)
    den = torch.maximum(torch.linalg.vector_norm(ga), torch.linalg.vector_norm(gb)) + 1e-8
    return float(num / den)


def _png_files(directory: str) -> dict[str, str]:
    return {
        name: os.path.join(directory, name)
        for name in sorted(os.listdir(directory))
        if name.lower().endswith(".png")
    }


def evaluate(dir_outputs: str, dir_target_domain: str, dir_sources: str) -> MetricsReport:
    """Score a directory of translated outputs.

    KID is computed between output features and the target-domain set;
    SSIM and the gradient structure distance are averaged over outputs paired
    with sources by filename. Unpaired outputs are skipped with a warning;
    it is an error if nothing pairs.
    """
    outputs = _png_files(dir_outputs)
    targets = _png_files(dir_target_domain)
    sources = _png_files(dir_sources)
    if not outputs or not targets or not sources:
        raise ValueError("all three directories must contain PNG files")

    paired = [name for name in outputs if name in sources]
    skipped = [name for name in outputs if name not in sources]
    if skipped:
        warnings.warn(f"skipping unpaired outputs (no source with same name): {skipped}")
    if not paired:
        raise ValueError("no output file pairs with a source by filename")

    out_images = [load_png(outputs[name]) for name in paired]
    src_images = [load_png(sources[name]) for name in paired]
    tgt_images = [load_png(path) for path in targets.values()]

    kid_value = kid(random_feature_embed(out_images), random_feature_embed(tgt_images))
    ssim_value = float(np.mean([ssim(o, s) for o, s in zip(out_images, src_images)]))
    dist_value = float(np.mean([grad_struct_dist(o, s) for o, s in zip(out_images, src_images)]))
    return MetricsReport(
        kid=kid_value,
        ssim=ssim_value,
        grad_struct_dist=dist_value,
        n_outputs=len(paired),
        n_targets=len(tgt_images),
        n_skipped=len(skipped),
    )


_REPORT_HEADER = (
    "# desk-scale metrics: KID uses a seeded random-projection feature embedder\n"
    "# (not Inception) and the structure distance uses Sobel fields (not DINO);\n"
    "# absolute values are not comparable to publication-scale results.\n"
)


def write_metrics(report: MetricsReport, out_dir: str) -> tuple[str, str]:
    """Write metrics.txt (key=value) and metrics.csv; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    txt_path = os.path.join(out_dir, "metrics.txt")
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(txt_path, "w") as f:
        f.write(_REPORT_HEADER)
        f.write(f"kid={report.kid!r}\n")
        f.write(f"ssim={report.ssim!r}\n")
        f.write(f"grad_struct_dist={report.grad_struct_dist!r}\n")
        f.write(f"n_outputs={report.n_outputs}\n")
        f.write(f"n_targets={report.n_targets}\n")
        f.write(f"n_skipped={report.n_skipped}\n")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["kid", "ssim", "grad_struct_dist", "n_outputs", "n_targets", "n_skipped"])
        writer.writerow([
            repr(report.kid), repr(report.ssim), repr(report.grad_struct_dist),
            report.n_outputs, report.n_targets, report.n_skipped,
        ])
    return txt_path, csv_path
