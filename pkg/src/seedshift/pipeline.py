"""End-to-end orchestration: encode, invert, seed-translate, trajectory-
optimize, decode, plus the run manifest that makes a run reproducible."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .backends import DenoiserBackend
from .config import TranslationConfig, apply_config_overrides, config_to_text
from .diffusion import invert
from .errors import PipelineError
from .losses import DomainSpec
from .seed_translation import export_loss_history, seed_translate
from .trajectory_optimization import export_step_losses, trajectory_optimize
from .toydata import load_png, save_png


@dataclass
class RunManifest:
    """Everything needed to bit-reproduce a translate run on one platform."""

    input_path: str
    domain_label: str
    source_label: str
    backend_id: str
    weights_hash: str
    rng_seed: int
    config: TranslationConfig
    output_paths: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(f"input_path={self.input_path}\n")
            f.write(f"domain_label={self.domain_label}\n")
            f.write(f"source_label={self.source_label}\n")
            f.write(f"backend_id={self.backend_id}\n")
            f.write(f"weights_hash={self.weights_hash}\n")
            f.write(f"rng_seed={self.rng_seed}\n")
            for key, val in self.output_paths.items():
                f.write(f"output.{key}={val}\n")
            for key, val in self.timings.items():
                f.write(f"timing.{key}={val:.3f}\n")
            for line in config_to_text(self.config).splitlines():
                f.write(f"config.{line.replace(' ', '')}\n")

    @staticmethod
    def load_config(path: str) -> TranslationConfig:
        """Rebuild the TranslationConfig snapshot stored in a manifest file."""
        overrides: dict[str, str] = {}
        with open(path) as f:
            for line in f:
                line = line.rstrip("\n")
                if line.startswith("config.") and "=" in line:
                    key, val = line[len("config."):].split("=", 1)
                    overrides[key] = val
        return apply_config_overrides(TranslationConfig(), overrides)


def translate(
    image_path: str,
    domain: DomainSpec,
    backend: DenoiserBackend,
    config: TranslationConfig,
    out_dir: str,
    source_domain: DomainSpec | None = None,
    rng_seed: int = 0,
    save_trajectories: bool = False,
) -> RunManifest:
    """Translate one image into the target domain and write all artifacts.

    Phases: load -> encode -> invert -> seed-translate -> trajectory-optimize
    -> write. Inversion is conditioned on the source domain when given, else
    on the target domain (which makes the n_st=n_to=0, omega=1 configuration
    a pure reconstruction pipeline). Any phase failure removes partial
    outputs and raises PipelineError naming the phase.
    """
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(image_path))[0]
    prefix = os.path.join(out_dir, f"{stem}__{domain.label}")
    written: list[str] = []
    timings: dict[str, float] = {}
    torch.manual_seed(rng_seed)

    def _phase(name: str, fn):
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            for path in written:
                if os.path.exists(path):
                    os.remove(path)
            raise PipelineError(name, exc) from exc
        timings[name] = time.perf_counter() - start
        return result

    def _load():
        img = load_png(image_path)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
            raise ValueError(f"expected a square RGB image, got shape {img.shape}")
        return img

    image = _phase("load", _load)
    image_t = torch.from_numpy(image)

    z0 = _phase("encode", lambda: backend.codec.encode(image_t))

    inv_cond = (source_domain or domain).condition
    seed, t_inv = _phase("invert", lambda: invert(z0, backend, inv_cond, config))

    st = _phase("seed-translate", lambda: seed_translate(seed, image_t, domain, backend, config))

    to = _phase(
        "trajectory-optimize",
        lambda: trajectory_optimize(
            t_inv, st.generation_trajectory, st.translated_seed, domain, backend, config
        ),
    )

    manifest = RunManifest(
        input_path=image_path,
        domain_label=domain.label,
        source_label=source_domain.label if source_domain else domain.label,
        backend_id=backend.backend_id,
        weights_hash=backend.weights_hash(),
        rng_seed=rng_seed,
        config=config,
        timings=timings,
    )

    def _write():
        out_image = np.clip(to.output_image.numpy(), 0.0, 1.0)
        image_out = prefix + ".png"
        save_png(image_out, out_image)
        written.append(image_out)
        manifest.output_paths["image"] = image_out

        st_csv = prefix + "_st_losses.csv"
        export_loss_history(st.loss_history, st_csv, config)
        written.append(st_csv)
        manifest.output_paths["st_losses"] = st_csv

        to_csv = prefix + "_to_losses.csv"
        export_step_losses(to.per_step_losses, to_csv)
        written.append(to_csv)
        manifest.output_paths["to_losses"] = to_csv

        if save_trajectories:
            schedule = backend.schedule.with_ddim_steps(config.ddim_steps)
            for tag, traj in (("tinv", t_inv), ("tgen", st.generation_trajectory)):
                traj_path = f"{prefix}_{tag}.npz"
                traj.save(traj_path, schedule, condition_label=inv_cond.label if tag == "tinv" else domain.label)
                written.extend([traj_path, traj_path.replace(".npz", ".meta.txt")])
                manifest.output_paths[tag] = traj_path

        manifest_path = prefix + "_manifest.txt"
        manifest.save(manifest_path)
        written.append(manifest_path)
        manifest.output_paths["manifest"] = manifest_path

    _phase("write", _write)
    return manifest
