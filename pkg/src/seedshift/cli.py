"""Batch command-line interface.

Commands: gen-data, train-toy, build-domain, invert, translate, evaluate.
Shared flags: --config (flat key=value file), --set key=value (overrides,
applied after the file), --seed, --out-dir, --save-trajectories.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np
import torch

from . import backends as be
from .config import TranslationConfig, apply_config_overrides, load_config
from .diffusion import DiffusionSchedule, invert
from .losses import build_domain_spec, load_domain_spec, save_domain_spec
from .metrics import evaluate, write_metrics
from .pipeline import translate
from .toydata import DOMAINS, generate_toy_dataset, load_png, write_dataset


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="config override (repeatable)")
    parser.add_argument("--seed", type=int, default=0, help="rng seed")
    parser.add_argument("--out-dir", default="out", help="output directory")
    parser.add_argument("--save-trajectories", action="store_true",
                        help="persist inversion/generation trajectory archives")


def _resolve_config(args) -> TranslationConfig:
    cfg = load_config(args.config) if args.config else TranslationConfig()
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    return apply_config_overrides(cfg, overrides)


def _expand_images(patterns: list[str]) -> list[str]:
    paths: list[str] = []
    for pat in patterns:
        if os.path.isdir(pat):
            paths.extend(sorted(
                os.path.join(pat, n) for n in os.listdir(pat) if n.lower().endswith(".png")
            ))
        else:
            matched = sorted(glob.glob(pat))
            paths.extend(matched if matched else [pat])
    return paths


def _cmd_gen_data(args) -> int:
    domains = args.domains.split(",") if args.domains else list(DOMAINS)
    for domain in domains:
        scenes = generate_toy_dataset(args.count, domain.strip(), args.seed)
        paths = write_dataset(scenes, args.out_dir)
        print(f"wrote {len(paths)} {domain} scenes to {args.out_dir}")
    return 0


def _cmd_train_toy(args) -> int:
    from .toydata import ToyScene, object_mask

    scenes = []
    for path in _expand_images([args.data_dir]):
        name = os.path.basename(path)
        domain = name.split("_", 1)[0]
        if domain not in DOMAINS:
            continue
        layout_seed = int(os.path.splitext(name.split("_", 1)[1])[0])
        img = load_png(path)
        scenes.append(ToyScene(image=img, domain=domain, layout_seed=layout_seed,
                               mask=object_mask(layout_seed, img.shape[0])))
    if not scenes:
        raise SystemExit(f"no {'/'.join(DOMAINS)} PNGs found in {args.data_dir}")
    cfg = _resolve_config(args)
    schedule = DiffusionSchedule.linear_beta(
        cfg.schedule_timesteps, cfg.beta_start, cfg.beta_end, cfg.ddim_steps
    )
    backend = be.train_toy_backend(scenes, epochs=args.epochs, rng_seed=args.seed,
                                   schedule=schedule)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    be.save_backend(backend, args.out)
    held = scenes[: min(8, len(scenes))]
    print(f"trained on {len(scenes)} scenes for {args.epochs} epochs; "
          f"denoising loss {be.denoising_loss(backend, held):.4f}; saved to {args.out}")
    return 0


def _cmd_build_domain(args) -> int:
    backend = be.load_backend(args.backend)
    examples = [load_png(p) for p in _expand_images([args.examples])]
    sources = [load_png(p) for p in _expand_images([args.source_examples])]
    if args.n is not None:
        examples, sources = examples[: args.n], sources[: args.n]
    spec = build_domain_spec(
        label=args.label,
        condition=backend.condition_for(args.label),
        example_images=examples,
        codec=backend.codec,
        source_examples=sources,
    )
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    save_domain_spec(spec, args.out)
    print(f"domain '{args.label}': {len(examples)} examples, eta={spec.eta.numpy().round(4)}")
    return 0


def _cmd_invert(args) -> int:
    backend = be.load_backend(args.backend)
    config = _resolve_config(args)
    cond = load_domain_spec(args.domain).condition if args.domain else backend.null_condition
    os.makedirs(args.out_dir, exist_ok=True)
    schedule = backend.schedule.with_ddim_steps(config.ddim_steps)
    for path in _expand_images([args.image]):
        img = torch.from_numpy(load_png(path))
        z0 = backend.codec.encode(img)
        seed, t_inv = invert(z0, backend, cond, config)
        stem = os.path.splitext(os.path.basename(path))[0]
        out = os.path.join(args.out_dir, f"{stem}_inversion.npz")
        t_inv.save(out, schedule, condition_label=cond.label)
        print(f"{path}: seed at t={seed.timestep}, trajectory -> {out}")
    return 0


def _cmd_translate(args) -> int:
    backend = be.load_backend(args.backend)
    config = _resolve_config(args)
    domain = load_domain_spec(args.domain)
    source = load_domain_spec(args.source_domain) if args.source_domain else None
    failures = 0
    for path in _expand_images(args.image):
        try:
            manifest = translate(
                path, domain, backend, config, args.out_dir,
                source_domain=source, rng_seed=args.seed,
                save_trajectories=args.save_trajectories,
            )
        except Exception as exc:
            print(f"FAILED {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        print(f"{path} -> {manifest.output_paths['image']} "
              f"({sum(manifest.timings.values()):.1f}s)")
    return 1 if failures else 0


def _cmd_evaluate(args) -> int:
    report = evaluate(args.outputs, args.target, args.sources)
    txt_path, _ = write_metrics(report, args.out_dir)
    print(f"kid={report.kid:.6f} ssim={report.ssim:.4f} "
          f"grad_struct_dist={report.grad_struct_dist:.4f} -> {txt_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seedshift",
                                     description="seed-space image-to-image translation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate procedural two-domain scenes")
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--domains", default=",".join(DOMAINS))
    _common_flags(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train-toy", help="train the toy denoiser backend")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--out", default="toy_backend.npz")
    _common_flags(p)
    p.set_defaults(fn=_cmd_train_toy)

    p = sub.add_parser("build-domain", help="build a domain spec from example images")
    p.add_argument("--label", required=True)
    p.add_argument("--examples", required=True, help="directory or glob of target examples")
    p.add_argument("--source-examples", required=True, help="directory or glob of source examples")
    p.add_argument("--backend", required=True)
    p.add_argument("--n", type=int, default=None, help="cap the number of examples")
    p.add_argument("--out", required=True)
    _common_flags(p)
    p.set_defaults(fn=_cmd_build_domain)

    p = sub.add_parser("invert", help="DDIM-invert images to seeds")
    p.add_argument("--image", required=True)
    p.add_argument("--backend", required=True)
    p.add_argument("--domain", default=None, help="domain spec for the inversion condition")
    _common_flags(p)
    p.set_defaults(fn=_cmd_invert)

    p = sub.add_parser("translate", help="run the full translation pipeline")
    p.add_argument("--image", nargs="+", required=True, help="image paths, globs, or directories")
    p.add_argument("--backend", required=True)
    p.add_argument("--domain", required=True, help="target domain spec archive")
    p.add_argument("--source-domain", default=None, help="source domain spec archive")
    _common_flags(p)
    p.set_defaults(fn=_cmd_translate)

    p = sub.add_parser("evaluate", help="score translated outputs")
    p.add_argument("--outputs", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--sources", required=True)
    _common_flags(p)
    p.set_defaults(fn=_cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    np.random.seed(args.seed)
    torch.manual_seed(args.seed)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
