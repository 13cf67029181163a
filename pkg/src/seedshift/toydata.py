"""Procedural two-domain street scenes used as the desk-scale dataset.

A scene is a horizon line, a few boxy vehicles with headlight discs, and a
few street lamps. Geometry (and thus the object mask) is a pure function of
layout_seed; the domain flag only changes photometry: day renders a bright
sky and dark, unlit lamps, night renders a dark sky with bright headlight
and lamp discs plus additive halos.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

DAY = "day"
NIGHT = "night"
DOMAINS = (DAY, NIGHT)

DEFAULT_IMAGE_SIZE = 64
_SUPERSAMPLE = 2
_BLUR_SIGMA = 1.1  # edge softening; keeps scenes representable after 4x pooling


@dataclass
class ToyScene:
    image: np.ndarray  # (X, X, 3) float32 in [0, 1]
    domain: str
    layout_seed: int
    mask: np.ndarray  # (X, X) bool, union of object footprints


def scene_layout(layout_seed: int, size: int = DEFAULT_IMAGE_SIZE) -> dict:
    """Scene geometry in pixel units, derived only from layout_seed."""
    rng = np.random.default_rng(layout_seed)
    horizon = rng.uniform(0.45, 0.62) * size

    vehicles = []
    for _ in range(int(rng.integers(1, 5))):
        w = rng.uniform(0.14, 0.26) * size
        h = rng.uniform(0.10, 0.16) * size
        x0 = rng.uniform(0.02, 0.98) * size - w / 2
        y1 = rng.uniform(horizon + 0.06 * size, 0.94 * size)
        tone = rng.uniform(0.25, 0.55)
        r = max(1.6, 0.10 * w)
        lights = [
            (x0 + 0.22 * w, y1 - 0.30 * h, r),
            (x0 + 0.78 * w, y1 - 0.30 * h, r),
        ]
        vehicles.append({"box": (x0, y1 - h, x0 + w, y1), "tone": tone, "lights": lights})

    lamps = []
    for _ in range(int(rng.integers(0, 4))):
        x = rng.uniform(0.05, 0.95) * size
        top = rng.uniform(0.12, 0.30) * size
        head_r = rng.uniform(1.8, 2.6)
        lamps.append({"x": x, "top": top, "base": horizon + 0.04 * size, "head_r": head_r})

    return {"size": size, "horizon": horizon, "vehicles": vehicles, "lamps": lamps}


def _disc(canvas: np.ndarray, cx: float, cy: float, r: float, color) -> None:
    n = canvas.shape[0]
    yy, xx = np.mgrid[0:n, 0:n]
    inside = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    canvas[inside] = color


def _box(canvas: np.ndarray, x0: float, y0: float, x1: float, y1: float, color) -> None:
    n = canvas.shape[0]
    xa, ya = max(int(round(x0)), 0), max(int(round(y0)), 0)
    xb, yb = min(int(round(x1)), n), min(int(round(y1)), n)
    if xb > xa and yb > ya:
        canvas[ya:yb, xa:xb] = color


def _halo(canvas: np.ndarray, cx: float, cy: float, sigma: float, color, amp: float) -> None:
    n = canvas.shape[0]
    yy, xx = np.mgrid[0:n, 0:n]
    g = np.exp(-((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) / (2 * sigma * sigma))
    canvas += amp * g[..., None] * np.asarray(color)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    radius = max(1, int(round(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    pad = ((radius, radius), (0, 0), (0, 0))
    out = np.pad(img, pad, mode="edge")
    out = np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 0, out)
    out = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 1, out)
    return out


def render_scene(layout_seed: int, domain: str, size: int = DEFAULT_IMAGE_SIZE) -> ToyScene:
    """Render one scene; geometry from layout_seed, photometry from domain."""
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    layout = scene_layout(layout_seed, size)
    s = _SUPERSAMPLE
    n = size * s
    horizon = layout["horizon"] * s
    canvas = np.zeros((n, n, 3), dtype=np.float64)

    if domain == DAY:
        sky, ground = np.array([0.74, 0.80, 0.88]), np.array([0.46, 0.44, 0.41])
    else:
        sky, ground = np.array([0.10, 0.12, 0.17]), np.array([0.16, 0.155, 0.15])

    # sky with a mild vertical gradient, flat ground
    hy = int(round(horizon))
    grad = np.linspace(1.06, 0.94, max(hy, 1))[:, None, None]
    canvas[:hy] = sky * grad
    canvas[hy:] = ground

    for lamp in layout["lamps"]:
        x, top, base = lamp["x"] * s, lamp["top"] * s, lamp["base"] * s
        pole_color = 0.24 if domain == DAY else 0.10
        _box(canvas, x - 0.8 * s, top, x + 0.8 * s, base, pole_color)
        head = np.array([0.30, 0.30, 0.32]) if domain == DAY else np.array([1.0, 0.98, 0.82])
        _disc(canvas, x, top, lamp["head_r"] * s, head)
        if domain == NIGHT:
            _halo(canvas, x, top, 3.5 * s, [1.0, 0.95, 0.75], amp=0.45)

    for veh in layout["vehicles"]:
        x0, y0, x1, y1 = (v * s for v in veh["box"])
        tone = veh["tone"] if domain == DAY else veh["tone"] * 0.35
        _box(canvas, x0, y0, x1, y1, [tone, tone * 0.96, tone * 0.92])
        for cx, cy, r in veh["lights"]:
            color = np.array([0.22, 0.22, 0.22]) if domain == DAY else np.array([1.0, 0.93, 0.70])
            _disc(canvas, cx * s, cy * s, r * s, color)
            if domain == NIGHT:
                _halo(canvas, cx * s, cy * s, 2.5 * s, [1.0, 0.9, 0.6], amp=0.5)

    # 2x supersampling -> average pool, then soften edges
    img = canvas.reshape(size, s, size, s, 3).mean(axis=(1, 3))
    img = _gaussian_blur(img, _BLUR_SIGMA)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ToyScene(image=img, domain=domain, layout_seed=layout_seed, mask=object_mask(layout_seed, size))


def object_mask(layout_seed: int, size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Boolean footprint of vehicles, lights, and lamps (no halos)."""
    layout = scene_layout(layout_seed, size)
    mask = np.zeros((size, size, 1), dtype=np.float64)
    for lamp in layout["lamps"]:
        _box(mask, lamp["x"] - 0.8, lamp["top"], lamp["x"] + 0.8, lamp["base"], 1.0)
        _disc(mask, lamp["x"], lamp["top"], lamp["head_r"], 1.0)
    for veh in layout["vehicles"]:
        x0, y0, x1, y1 = veh["box"]
        _box(mask, x0, y0, x1, y1, 1.0)
        for cx, cy, r in veh["lights"]:
            _disc(mask, cx, cy, r, 1.0)
    return mask[..., 0] > 0.5


def generate_toy_dataset(count: int, domain: str, rng_seed: int) -> list[ToyScene]:
    """Generate scenes with layout seeds drawn (without repeats) from rng_seed.

    The same rng_seed produces the same layout-seed sequence for either
    domain, so day/night datasets generated with equal rng_seed are paired
    scene by scene.
    """
    if count <= 0:
        raise ValueError(f"count must be > 0, got {count}")
    rng = np.random.default_rng(rng_seed)
    layout_seeds = rng.choice(100_000, size=count, replace=False)
    return [render_scene(int(ls), domain) for ls in layout_seeds]


def save_png(path: str, image: np.ndarray) -> None:
    """Write a [0,1] float image as 8-bit PNG (round half to even)."""
    arr = np.asarray(image, dtype=np.float64)
    quantized = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path)


def load_png(path: str) -> np.ndarray:
    """Read an 8-bit PNG into a [0,1] float32 array of shape (H, W, 3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_dataset(scenes: list[ToyScene], out_dir: str) -> list[str]:
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for scene in scenes:
        path = os.path.join(out_dir, f"{scene.domain}_{scene.layout_seed:05d}.png")
        save_png(path, scene.image)
        paths.append(path)
    return paths
