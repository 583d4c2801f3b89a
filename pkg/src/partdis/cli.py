"""Command-line entry points: train, eval, swap, synthesize-sprites,
export-activations.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure. Every command writes its resolved configuration next to its outputs
so a run can be reconstructed from its output directory alone.
"""

import argparse
import csv
import os
import sys
from pathlib import Path

import torch
import yaml

from . import evaluation, trainer
from .data import (
    Dataset,
    generate_sprites,
    load_image_folder,
    save_image,
    write_landmarks_csv,
    _load_image_file,
)
from .networks import load_checkpoint
from .objectives import NumericalError
from .partcore import normalize_maps

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# fixed 16-color palette for part overlays (RGB in [0, 1])
PALETTE = torch.tensor(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.60, 0.90],
        [0.10, 0.80, 0.20],
        [0.95, 0.75, 0.10],
        [0.70, 0.20, 0.85],
        [0.95, 0.45, 0.10],
        [0.15, 0.85, 0.80],
        [0.90, 0.30, 0.60],
        [0.55, 0.75, 0.15],
        [0.30, 0.30, 0.95],
        [0.80, 0.60, 0.40],
        [0.45, 0.90, 0.55],
        [0.85, 0.85, 0.30],
        [0.50, 0.15, 0.45],
        [0.25, 0.50, 0.35],
        [0.75, 0.75, 0.75],
    ]
)


def part_assignment(maps):
    """Per-pixel argmax over part maps; maps: (K, h, w) -> (h, w) long."""
    return maps.argmax(dim=0)


def render_overlay(image, maps, alpha_gain=0.6):
    """Alpha-blend part colors over the image, colored by per-pixel argmax.

    image: (3, H, W); maps: (K, h, w) raw activations (resized to H x W).
    Blend strength follows the winning map's activation relative to its peak.
    """
    k = maps.shape[0]
    if maps.shape[-2:] != image.shape[-2:]:
        maps = torch.nn.functional.interpolate(
            maps.unsqueeze(0), size=image.shape[-2:], mode="bilinear", align_corners=False
        ).squeeze(0)
    assign = part_assignment(maps)
    peak = maps.amax(dim=(-2, -1), keepdim=True).clamp_min(1e-12)
    strength = (maps / peak).amax(dim=0)  # strength of the winning part
    colors = PALETTE[:k].to(image.dtype)[assign].permute(2, 0, 1)
    a = (alpha_gain * strength).unsqueeze(0)
    return image * (1 - a) + colors * a


def _resolve_out(args, default_name):
    root = os.environ.get("PARTDIS_OUT_ROOT", "runs")
    out = Path(args.out) if args.out else Path(root) / default_name
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise FileExistsError(
            f"output directory {out} is not empty (pass --overwrite to reuse it)"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args):
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ValueError(f"config file not found: {path}")
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if "preset" in raw:
            cfg = trainer.preset(raw.pop("preset"))
            base = trainer.config_to_dict(cfg)
            _deep_update(base, raw)
            cfg = trainer.config_from_dict(base)
        else:
            cfg = trainer.config_from_dict(raw)
    elif args.preset:
        cfg = trainer.preset(args.preset)
    else:
        raise ValueError("either --config or --preset is required")
    if getattr(args, "steps", None) is not None:
        cfg.steps = args.steps
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _deep_update(base, overrides):
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], val)
        else:
            base[key] = val


def _write_resolved_config(out, cfg):
    with open(out / "config_resolved.yaml", "w") as f:
        yaml.safe_dump(trainer.config_to_dict(cfg), f, sort_keys=False)


def cmd_train(args):
    cfg = _load_config(args)
    out = _resolve_out(args, cfg.run_name)
    _write_resolved_config(out, cfg)
    trainer.fit(cfg, out, resume=args.resume)
    print(f"training complete; outputs in {out}")
    return 0


def cmd_eval(args):
    model, step, extra = load_checkpoint(args.checkpoint)
    run_cfg = trainer.config_from_dict(extra["run_config"])
    if args.data:
        run_cfg.data.path = args.data
        run_cfg.data.kind = "folder"
    train_ds, test_ds = trainer.build_datasets(run_cfg)
    out = _resolve_out(args, f"{run_cfg.run_name}-eval")
    _write_resolved_config(out, run_cfg)
    eval_cfg = evaluation.EvalConfig(normalization=args.normalization)
    report = evaluation.evaluate_run(model, test_ds, train_ds, eval_cfg)
    report.extras["checkpoint_step"] = step
    report.write(out / "report.json", out / "per_landmark.csv")
    print(f"mean error ({report.normalization_mode}): {report.mean_error:.3f}")
    print(f"report written to {out / 'report.json'}")
    return 0


def _parse_parts(spec, num_parts):
    if spec is None or spec == "all":
        return list(range(num_parts))
    if spec.strip() == "":
        return []
    parts = [int(tok) for tok in spec.split(",") if tok.strip() != ""]
    bad = [p for p in parts if p < 0 or p >= num_parts]
    if bad:
        raise ValueError(
            f"invalid part indices {bad}; valid range is 0..{num_parts - 1}"
        )
    return parts


def cmd_swap(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    parts = _parse_parts(args.parts, model.cfg.num_parts)
    size = model.cfg.image_size
    shape_img, _ = _load_image_file(args.shape_image, image_size=size)
    app_img, _ = _load_image_file(args.appearance_image, image_size=size)
    out = _resolve_out(args, "swap")
    result = trainer.swap(model, shape_img, app_img, parts)
    save_image(out / "swap.png", result)
    res = trainer.infer(model, shape_img)
    save_image(out / "parts_overlay.png", render_overlay(shape_img, res.maps))
    with open(out / "config_resolved.yaml", "w") as f:
        yaml.safe_dump(
            {
                "checkpoint": str(args.checkpoint),
                "shape_image": str(args.shape_image),
                "appearance_image": str(args.appearance_image),
                "parts": parts,
            },
            f,
        )
    print(f"swap written to {out / 'swap.png'}")
    return 0


def cmd_synthesize_sprites(args):
    from .data import SpriteConfig

    cfg = SpriteConfig(count=args.count, size=args.size)
    out = _resolve_out(args, "sprites")
    gen = torch.Generator().manual_seed(args.seed or 0)
    ds = generate_sprites(cfg, gen)
    n_test = max(1, int(len(ds) * args.test_fraction))
    splits = {"train": ds.samples[:-n_test], "test": ds.samples[-n_test:]}
    for split, samples in splits.items():
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            save_image(split_dir / f"{i:05d}.png", s.image)
        write_landmarks_csv(
            split_dir / "landmarks.csv", torch.stack([s.landmarks for s in samples])
        )
    with open(out / "config_resolved.yaml", "w") as f:
        yaml.safe_dump(
            {"count": args.count, "size": args.size, "seed": args.seed or 0}, f
        )
    print(f"sprites written to {out}")
    return 0


def cmd_export_activations(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    size = model.cfg.image_size
    image_paths = []
    src = Path(args.images)
    if src.is_dir():
        image_paths = sorted(
            p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
        )
    else:
        image_paths = [src]
    if not image_paths:
        raise FileNotFoundError(f"no images found at {src}")
    out = _resolve_out(args, "activations")
    rows = []
    for i, p in enumerate(image_paths):
        img, _ = _load_image_file(p, image_size=size)
        res = trainer.infer(model, img)
        save_image(out / f"{p.stem}_overlay.png", render_overlay(img, res.maps))
        for k in range(model.cfg.num_parts):
            mu = res.moments.mean[k]
            cov = res.moments.cov[k]
            rows.append(
                [
                    p.name,
                    k,
                    f"{float(mu[0]):.8f}",
                    f"{float(mu[1]):.8f}",
                    f"{float(cov[0, 0]):.8f}",
                    f"{float(cov[0, 1]):.8f}",
                    f"{float(cov[1, 1]):.8f}",
                ]
            )
    with open(out / "moments.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "part", "mu_row", "mu_col", "cov_rr", "cov_rc", "cov_cc"])
        writer.writerows(rows)
    with open(out / "config_resolved.yaml", "w") as f:
        yaml.safe_dump({"checkpoint": str(args.checkpoint), "images": str(src)}, f)
    print(f"overlays and moments written to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="partdis",
        description="Unsupervised part-based disentangling of shape and appearance",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config or preset")
    p_train.add_argument("--config", help="YAML run configuration")
    p_train.add_argument("--preset", help="named preset", default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--overwrite", action="store_true")
    p_train.add_argument("--resume", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", default=None, help="override dataset folder")
    p_eval.add_argument(
        "--normalization",
        default="edge-length",
        choices=evaluation.NORMALIZATION_MODES,
    )
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--overwrite", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_swap = sub.add_parser("swap", help="shape/appearance swap")
    p_swap.add_argument("--checkpoint", required=True)
    p_swap.add_argument("--shape-image", required=True)
    p_swap.add_argument("--appearance-image", required=True)
    p_swap.add_argument("--parts", default="all", help='"all", "", or comma list')
    p_swap.add_argument("--out", default=None)
    p_swap.add_argument("--overwrite", action="store_true")
    p_swap.set_defaults(func=cmd_swap)

    p_syn = sub.add_parser("synthesize-sprites", help="write a sprite dataset to disk")
    p_syn.add_argument("--count", type=int, default=2000)
    p_syn.add_argument("--size", type=int, default=64)
    p_syn.add_argument("--seed", type=int, default=0)
    p_syn.add_argument("--test-fraction", type=float, default=0.1)
    p_syn.add_argument("--out", default=None)
    p_syn.add_argument("--overwrite", action="store_true")
    p_syn.set_defaults(func=cmd_synthesize_sprites)

    p_exp = sub.add_parser("export-activations", help="part overlays and moment CSV")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--images", required=True, help="image file or directory")
    p_exp.add_argument("--out", default=None)
    p_exp.add_argument("--overwrite", action="store_true")
    p_exp.set_defaults(func=cmd_export_activations)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad flags; report as config errors
        return EXIT_CONFIG if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValueError, FileExistsError, yaml.YAMLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
