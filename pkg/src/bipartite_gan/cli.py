"""Command-line laboratory tying the pieces together.

Subcommands: gen-data (render a synthetic dataset), train (adversarial
training with logs and checkpoints), sample (images from an averaged
generator), attmaps (attention-map heatmaps and composites), eval (metric
report), bench (attention complexity measurements), and ablate (attention
placement sweeps). Configuration comes from one "key = value" file plus flag
overrides (flags win); every command echoes the effective configuration to
resolved.cfg under --out-dir. Exit codes: 0 success, 1 usage or configuration
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import engine as eng
from . import imageio
from .attention import (
    AttentionParams,
    FeatureGrid,
    LatentSet,
    export_attention_maps,
    simplex_update,
)
from .config import (
    ConfigError,
    RunConfig,
    format_config,
    generator_config,
    load_config,
    set_key,
    train_config,
)
from .engine import Tensor
from .network import Generator, sample_images
from .rng import Xoshiro256StarStar, mix64
from .scenes import generate_dataset, load_dataset_images
from .training import (
    CheckpointFormatError,
    TrainingDiverged,
    checkpoint_load,
    checkpoint_read,
    init_train_state,
    run_training,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit with code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- configuration plumbing ------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a 'key = value' configuration file")
    p.add_argument("--out-dir", help="output directory (overrides the out_dir key)")
    p.add_argument("--seed", type=int, help="override the seed key")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any configuration key; may repeat",
    )


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, raw = item.split("=", 1)
        set_key(cfg, key.strip(), raw, f"--set {key.strip()}")
    if args.seed is not None:
        set_key(cfg, "seed", str(args.seed), "--seed")
    if getattr(args, "data_dir", None):
        cfg.dataset_dir = args.data_dir
    if getattr(args, "steps", None) is not None:
        set_key(cfg, "total_steps", str(args.steps), "--steps")
    if args.out_dir:
        cfg.out_dir = args.out_dir
    return cfg


def _write_resolved(cfg: RunConfig) -> str:
    imageio.ensure_dir(cfg.out_dir)
    path = os.path.join(cfg.out_dir, "resolved.cfg")
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
    return path


# -- shared model helpers ----------------------------------------------------


def latest_checkpoint(out_dir: str) -> str:
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    best_step, best = -1, None
    if os.path.isdir(ckpt_dir):
        for name in os.listdir(ckpt_dir):
            if name.startswith("step") and name.endswith(".ckpt"):
                try:
                    step = int(name[4:-5])
                except ValueError:
                    continue
                if step > best_step:
                    best_step, best = step, os.path.join(ckpt_dir, name)
    if best is None:
        raise FileNotFoundError(f"no checkpoints under {ckpt_dir}")
    return best


def load_ema_generator(path: str, cfg: RunConfig) -> Generator:
    """Build a generator from the EMA weights stored in a checkpoint."""
    tensors, _, _ = checkpoint_read(path)
    gen = Generator(generator_config(cfg), Xoshiro256StarStar(0))
    for name, param in gen.named_params().items():
        key = f"ema.{name}"
        if key not in tensors:
            raise CheckpointFormatError(f"{path}: missing tensor {key}")
        if tensors[key].shape != param.data.shape:
            raise CheckpointFormatError(
                f"{path}: shape mismatch for {key}: "
                f"file {tensors[key].shape} vs model {param.data.shape}"
            )
        param.data[...] = tensors[key]
    return gen


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    if cfg.resolution < 16:
        raise ConfigError(f"gen-data needs resolution >= 16, got {cfg.resolution}")
    _write_resolved(cfg)
    manifest = generate_dataset(cfg.n_scenes, cfg.seed, cfg.out_dir, cfg.resolution)
    print(f"wrote {cfg.n_scenes} scenes at {cfg.resolution}px to {cfg.out_dir} ({manifest})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    gen_cfg = generator_config(cfg)
    t_cfg = train_config(cfg)
    if not cfg.dataset_dir:
        raise ConfigError("train needs dataset_dir (key or --data-dir)")
    images = load_dataset_images(cfg.dataset_dir)
    if images.shape[-1] != cfg.resolution:
        raise ConfigError(
            f"dataset is {images.shape[-1]}px but resolution = {cfg.resolution}"
        )
    if args.resume:
        state = checkpoint_load(args.resume, gen_cfg, t_cfg)
    else:
        state = init_train_state(gen_cfg, t_cfg)
    _write_resolved(cfg)
    log_path = os.path.join(cfg.out_dir, "log.jsonl")
    ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
    records = run_training(
        state,
        images,
        t_cfg.total_steps,
        log_path=log_path,
        checkpoint_dir=ckpt_dir,
        checkpoint_interval=cfg.checkpoint_interval,
        log_every=cfg.log_every,
    )
    last = records[-1] if records else {"step": state.step}
    print(f"trained to step {state.step}: {json.dumps(last)}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    ckpt = args.checkpoint or latest_checkpoint(cfg.out_dir)
    gen = load_ema_generator(ckpt, cfg)
    _write_resolved(cfg)
    images = sample_images(gen, args.n, cfg.seed)
    img_dir = os.path.join(cfg.out_dir, "images")
    imageio.ensure_dir(img_dir)
    for i in range(images.shape[0]):
        imageio.save_ppm(os.path.join(img_dir, f"sample{i:05d}.ppm"), images[i])
    print(f"wrote {images.shape[0]} samples from {ckpt} to {img_dir}")
    return EXIT_OK


def cmd_attmaps(args) -> int:
    cfg = _resolve_config(args)
    ckpt = args.checkpoint or latest_checkpoint(cfg.out_dir)
    gen = load_ema_generator(ckpt, cfg)
    _write_resolved(cfg)
    rng = Xoshiro256StarStar(mix64(cfg.seed ^ 0x53414D50))
    z = rng.normals((1, gen.config.k * gen.config.latent_dim), dtype=np.float32)
    with eng.no_grad():
        image, weights = gen.forward(Tensor(z))
    maps_dir = os.path.join(cfg.out_dir, "attmaps")
    levels = [l for l, w in enumerate(weights) if w is not None]
    shapes = [
        (gen.config.base_resolution << l, gen.config.base_resolution << l) for l in levels
    ]
    paths = export_attention_maps([weights[l].data[0] for l in levels], shapes, maps_dir)
    imageio.ensure_dir(maps_dir)
    imageio.save_ppm(os.path.join(maps_dir, "sample.ppm"), image.data[0])
    print(f"wrote {len(paths)} attention maps for levels {levels} to {maps_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import metrics  # heavy import kept off the fast paths

    cfg = _resolve_config(args)
    if not cfg.dataset_dir:
        raise ConfigError("eval needs dataset_dir (key or --data-dir)")
    ckpt = args.checkpoint or latest_checkpoint(cfg.out_dir)
    gen = load_ema_generator(ckpt, cfg)
    _write_resolved(cfg)
    real = load_dataset_images(cfg.dataset_dir)
    report = metrics.full_report(
        gen,
        real,
        n_samples=cfg.eval_samples,
        embedder_seed=cfg.embedder_seed,
        seed=cfg.seed,
    )
    path = os.path.join(cfg.out_dir, "metrics.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(
        f"fed={report['fed']:.4f} precision={report['precision']:.3f} "
        f"recall={report['recall']:.3f} -> {path}"
    )
    return EXIT_OK


# -- attention complexity benchmark -------------------------------------------


def bench_grid_shape(n: int) -> tuple[int, int]:
    """Factor n = H * W with H = 2^ceil(a/2) for n = 2^a."""
    if n < 1 or n & (n - 1):
        raise ConfigError(f"bench sizes must be powers of two, got {n}")
    a = n.bit_length() - 1
    h = 1 << ((a + 1) // 2)
    return h, n // h


def bench_attention(
    n_list,
    m: int = 16,
    d: int = 64,
    heads: int = 1,
    variant: str = "bipartite",
    repeats: int = 5,
) -> dict:
    """Measure attention cost across grid sizes.

    Runs one forward attention update per size, reporting exact
    multiply-accumulate counts (split into the n x m attention core and the
    per-element q/k/v/gamma/beta maps) and median wall time over `repeats`,
    plus the fitted log-log slope of time against n. The bipartite core costs
    2*n*m*d MACs; with the latents replaced by the features themselves
    (variant "self") it costs 2*n*n*d.
    """
    if variant not in ("bipartite", "self"):
        raise ConfigError(f"bench variant must be bipartite or self, got {variant!r}")
    if list(n_list) != sorted(set(n_list)):
        raise ConfigError(f"bench sizes must be ascending and distinct, got {n_list}")
    if d % 4 != 0 or d % heads != 0:
        raise ConfigError(f"bench needs heads | d and 4 | d, got d={d} heads={heads}")
    rng = Xoshiro256StarStar(mix64(0xBE7C))
    params = AttentionParams.create(d, heads, "simplex", rng)
    entries = []
    for n in n_list:
        h, w = bench_grid_shape(n)
        feats = Tensor(rng.normals((n, d), dtype=np.float32))
        grid = FeatureGrid.create(feats, h, w)
        if variant == "bipartite":
            latents = LatentSet(
                Tensor(rng.normals((m, d), dtype=np.float32)),
                Tensor(np.zeros((m, d), dtype=np.float32)),
            )
        else:
            latents = LatentSet(feats, Tensor(np.zeros((n, d), dtype=np.float32)))
        with eng.no_grad():
            with eng.count_macs() as counter:
                simplex_update(grid, latents, params)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                simplex_update(grid, latents, params)
                times.append(time.perf_counter() - t0)
        entries.append(
            {
                "n": n,
                "grid": [h, w],
                "m": m if variant == "bipartite" else n,
                "core_macs": counter.get("attn_core"),
                "map_macs": counter.get("attn_maps"),
                "wall_time": float(np.median(times)),
            }
        )
    slope = float(
        np.polyfit(
            np.log([e["n"] for e in entries]), np.log([e["wall_time"] for e in entries]), 1
        )[0]
    ) if len(entries) >= 2 else float("nan")
    return {
        "variant": variant,
        "m": m,
        "d": d,
        "heads": heads,
        "repeats": repeats,
        "entries": entries,
        "loglog_slope": slope,
    }


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    n_list = [int(x) for x in args.n_list.split(",") if x.strip()]
    variants = ["bipartite", "self"] if args.variant == "both" else [args.variant]
    report = {}
    for variant in variants:
        report[variant] = bench_attention(
            n_list, m=args.m, d=args.d, heads=args.heads, variant=variant,
            repeats=args.repeats,
        )
        rows = report[variant]["entries"]
        for e in rows:
            print(
                f"{variant:9s} n={e['n']:6d} core={e['core_macs']:12d} "
                f"maps={e['map_macs']:12d} t={e['wall_time'] * 1e3:9.3f} ms"
            )
        print(f"{variant:9s} log-log slope {report[variant]['loglog_slope']:.3f}")
    _write_resolved(cfg)
    path = os.path.join(cfg.out_dir, "bench.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {path}")
    return EXIT_OK


# -- ablation sweep ------------------------------------------------------------


def ablation_sweep(cfg: RunConfig, first_levels, last_levels, images) -> dict:
    """Train one short run per (first, last) attention placement.

    Every cell shares the same seed and budget; pairs with first > last are
    reported as skipped. Each trained cell reports final losses and the
    embedding distance of its averaged generator against the real images.
    """
    from . import metrics

    levels = generator_config(cfg).num_levels
    for value in list(first_levels) + list(last_levels):
        if not 0 <= value < levels:
            raise ConfigError(f"ablation level {value} outside [0, {levels - 1}]")
    n_eval = min(cfg.eval_samples, images.shape[0])
    embed = metrics.ImageEmbedder(cfg.embedder_seed, cfg.resolution)
    real_feats = embed.embed(images[:n_eval])
    cells = []
    for first in first_levels:
        for last in last_levels:
            if first > last:
                cells.append({"first": first, "last": last, "skipped": True})
                continue
            cell_cfg = RunConfig(**{**cfg.__dict__})
            cell_cfg.attn_first_level = first
            cell_cfg.attn_last_level = last
            state = init_train_state(generator_config(cell_cfg), train_config(cell_cfg))
            records = run_training(state, images, cfg.total_steps)
            gen = state.ema_generator()
            fake = sample_images(gen, n_eval, cfg.seed)
            fed = metrics.frechet_embed_distance(real_feats, embed.embed(fake))
            last_record = records[-1] if records else {}
            cells.append(
                {
                    "first": first,
                    "last": last,
                    "skipped": False,
                    "g_loss": last_record.get("g_loss"),
                    "d_loss": last_record.get("d_loss"),
                    "fed": fed,
                }
            )
    return {
        "seed": cfg.seed,
        "steps": cfg.total_steps,
        "eval_samples": n_eval,
        "embedder_seed": cfg.embedder_seed,
        "cells": cells,
    }


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    if not cfg.dataset_dir:
        raise ConfigError("ablate needs dataset_dir (key or --data-dir)")
    images = load_dataset_images(cfg.dataset_dir)
    first_levels = [int(x) for x in args.first_levels.split(",") if x.strip()]
    last_levels = [int(x) for x in args.last_levels.split(",") if x.strip()]
    if not first_levels or not last_levels:
        raise ConfigError("ablate needs nonempty --first-levels and --last-levels")
    _write_resolved(cfg)
    report = ablation_sweep(cfg, first_levels, last_levels, images)
    path = os.path.join(cfg.out_dir, "ablation.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    done = sum(1 for c in report["cells"] if not c["skipped"])
    print(f"swept {len(report['cells'])} cells ({done} trained) -> {path}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bipartite-gan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic scene dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run adversarial training")
    _add_common(p)
    p.add_argument("--data-dir", help="dataset directory (overrides dataset_dir)")
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample images from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: latest in out dir)")
    p.add_argument("--n", type=int, default=16, help="number of samples")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("attmaps", help="export attention maps for one sample")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: latest in out dir)")
    p.set_defaults(func=cmd_attmaps)

    p = sub.add_parser("eval", help="write a metrics report")
    _add_common(p)
    p.add_argument("--data-dir", help="dataset directory (overrides dataset_dir)")
    p.add_argument("--checkpoint", help="checkpoint path (default: latest in out dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="attention complexity benchmark")
    _add_common(p)
    p.add_argument("--n-list", default="256,1024,4096", help="comma-separated grid sizes")
    p.add_argument("--m", type=int, default=16, help="latent count")
    p.add_argument("--d", type=int, default=64, help="feature dimension")
    p.add_argument("--heads", type=int, default=1, help="attention heads")
    p.add_argument("--repeats", type=int, default=5, help="timing repeats per size")
    p.add_argument(
        "--variant",
        choices=["bipartite", "self", "both"],
        default="both",
        help="which attention graph to measure",
    )
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="attention placement sweep")
    _add_common(p)
    p.add_argument("--data-dir", help="dataset directory (overrides dataset_dir)")
    p.add_argument("--steps", type=int, help="override total_steps (cell budget)")
    p.add_argument("--first-levels", default="0", help="comma-separated first levels")
    p.add_argument("--last-levels", default="0", help="comma-separated last levels")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointFormatError, TrainingDiverged, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
