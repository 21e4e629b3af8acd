"""Command-line interface: gen | train | render | eval | ablate.

Every command is reproducible: the effective configuration is snapshotted
next to the outputs and, together with the seed, fully determines them in
deterministic mode. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numeric divergence.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import field as field_mod
from . import optimizer as opt
from .config import default_config, load_config
from .errors import ConfigError, DataError, DivergenceError, NumericError
from .geometry import load_poses
from .losses import LossGains
from .metrics import EvalReport, depth_rmse, psnr, ssim
from .pipeline import render_image
from .scenes import (dataset_sha256, load_dataset, make_dataset, save_dataset,
                     save_png, save_raster)

log = logging.getLogger(__name__)

ABLATION_ARMS = (
    ("photo", LossGains(1.0, 0.0, 0.0)),
    ("photo+density", LossGains(1.0, 1.0, 0.0)),
    ("photo+density+depth", LossGains(1.0, 1.0, 1.0)),
)


def _add_common(p):
    """Flags shared by every command. Rendering and evaluation are already
    deterministic, so --seed/--deterministic only affect them through the
    config snapshot they would override."""
    p.add_argument("--config", help="configuration file (key = value sections)")
    p.add_argument("--seed", type=int, help="override [train] seed")
    p.add_argument("--threads", type=int, help="override [train] threads")
    p.add_argument("--deterministic", action="store_true",
                   help="force deterministic mode")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="radfield",
        description="Depth-uncertainty-supervised radiance field engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train coarse+fine networks on a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--gains", help="k_color,k_density,k_depth (e.g. 1,1,0)")
    p.add_argument("--iters", type=int, help="override [train] max_iters")

    p = sub.add_parser("render", help="render poses from a trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True,
                   help="directory holding coarse.ckpt/fine.ckpt + config snapshot")
    p.add_argument("--poses", required=True, help="pose file to render")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))

    p = sub.add_parser("ablate", help="run the three loss arms and tabulate")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--iters", type=int, help="override [train] max_iters")
    return parser


def _load_run_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg.set("train", "seed", args.seed)
    if getattr(args, "threads", None) is not None:
        cfg.set("train", "threads", args.threads)
    if getattr(args, "deterministic", False):
        cfg.set("train", "deterministic", True)
    if getattr(args, "iters", None) is not None:
        cfg.set("train", "max_iters", args.iters)
    return cfg


def _parse_gains(raw):
    parts = raw.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--gains expects three comma-separated values, got {raw!r}")
    try:
        k = [float(v) for v in parts]
    except ValueError:
        raise ConfigError(f"--gains values must be numeric, got {raw!r}") from None
    return k


def _outdir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / ".write-test").write_bytes(b"")
        (out / ".write-test").unlink()
    except OSError as exc:
        raise DataError(f"output directory {path} is not writable: {exc}") from exc
    return out


def _snapshot(cfg, out):
    (out / "config.txt").write_text(cfg.snapshot(), encoding="ascii")


def cmd_gen(args):
    cfg = _load_run_config(args)
    out = _outdir(args.out)
    dataset = make_dataset(
        scene=cfg.scene(), ring=cfg.ring(), n_views=cfg.get("scene", "n_views"),
        intr=cfg.intrinsics(), t_near=cfg.get("camera", "near"),
        t_far=cfg.get("camera", "far"), seed=cfg.get("train", "seed"),
        depth_sigma=cfg.get("scene", "depth_sigma"),
        outlier_rate=cfg.get("scene", "outlier_rate"),
        test_stride=cfg.get("scene", "test_stride"),
        n_dense=cfg.get("scene", "gt_samples"),
    )
    save_dataset(dataset, out)
    _snapshot(cfg, out)
    print(f"dataset: {dataset.n_views()} views "
          f"({dataset.splits.count('train')} train / {dataset.splits.count('test')} test) "
          f"-> {out}")
    return 0


def run_training(dataset, cfg, out):
    """Train, then write history, checkpoints, and the config snapshot."""
    result = opt.train(dataset, cfg.train_config(), field_cfg=cfg.field_config())
    opt.write_history(out / "history.csv", result.history)
    field_mod.save_params(result.params_coarse, out / "coarse.ckpt")
    field_mod.save_params(result.params_fine, out / "fine.ckpt")
    opt.save_adam(result.adam_coarse, out / "adam_coarse.state")
    opt.save_adam(result.adam_fine, out / "adam_fine.state")
    _snapshot(cfg, out)
    return result


def cmd_train(args):
    cfg = _load_run_config(args)
    if args.gains:
        kc, kd, kz = _parse_gains(args.gains)
        cfg.set("loss", "k_color", kc)
        cfg.set("loss", "k_density", kd)
        cfg.set("loss", "k_depth", kz)
    dataset = load_dataset(args.dataset)
    out = _outdir(args.out)
    result = run_training(dataset, cfg, out)
    print(f"trained {result.iterations} iterations; "
          f"best val PSNR {result.best_val_psnr:.3f} dB (epoch {result.best_epoch}) "
          f"-> {out}")
    return 0


def _load_checkpoint_dir(path):
    root = Path(path)
    params_c = field_mod.load_params(root / "coarse.ckpt")
    params_f = field_mod.load_params(root / "fine.ckpt")
    snap = root / "config.txt"
    if not snap.exists():
        raise DataError(f"{root}: missing config snapshot config.txt")
    cfg = load_config(snap)
    return params_c, params_f, cfg


def _checkpoint_with_config(args):
    """Checkpoint plus its effective config: the snapshot written at training
    time, unless --config overrides it."""
    params_c, params_f, snap = _load_checkpoint_dir(args.checkpoint)
    cfg = load_config(args.config) if args.config else snap
    threads = args.threads if args.threads else cfg.get("train", "threads")
    return params_c, params_f, cfg, threads


def cmd_render(args):
    params_c, params_f, cfg, threads = _checkpoint_with_config(args)
    poses = load_poses(args.poses)
    out = _outdir(args.out)
    intr = cfg.intrinsics()
    near, far = cfg.get("camera", "near"), cfg.get("camera", "far")
    for i, pose in enumerate(poses):
        rgb, depth = render_image(
            params_c, params_f, intr, pose, near, far,
            cfg.get("train", "n_coarse"), cfg.get("train", "n_fine"),
            threads=threads,
        )
        tag = f"{i:03d}"
        save_png(out / f"render_{tag}.png", rgb)
        save_raster(out / f"render_{tag}.pfr", rgb)
        save_raster(out / f"depth_{tag}.pfr", depth)
    print(f"rendered {len(poses)} poses -> {out}")
    return 0


def evaluate_checkpoint(params_c, params_f, cfg, dataset, split, threads=1):
    """EvalReport over the views of one split."""
    views = [i for i, s in enumerate(dataset.splits) if s == split]
    if not views:
        raise DataError(f"dataset has no '{split}' views")
    intr = dataset.intrinsics
    n_c, n_f = cfg.get("train", "n_coarse"), cfg.get("train", "n_fine")
    rows = []
    for view in views:
        rgb, depth = render_image(
            params_c, params_f, intr, dataset.poses[view], dataset.t_near,
            dataset.t_far, n_c, n_f, threads=threads,
        )
        p = psnr(rgb, dataset.images[view])
        s = ssim(rgb, dataset.images[view])
        d = depth_rmse(depth, dataset.depths[view], dataset.valid[view])
        l1 = _pdf_l1(params_c, params_f, dataset, view, n_c, n_f, threads)
        rows.append((f"view_{view:03d}", p, s, d, l1))
    finite = [r[1] for r in rows if np.isfinite(r[1])]
    mean_psnr = float(np.mean(finite)) if finite else float("inf")
    pdf_vals = [r[4] for r in rows if not np.isnan(r[4])]
    return EvalReport(
        psnr=mean_psnr,
        ssim=float(np.mean([r[2] for r in rows])),
        depth_rmse=float(np.mean([r[3] for r in rows])),
        mean_pdf_l1=float(np.mean(pdf_vals)) if pdf_vals else float("nan"),
        rows=rows,
    )


def _pdf_l1(params_c, params_f, dataset, view, n_c, n_f, threads):
    """Mean L1 between rendered and target fine-grid depth PDFs (diagnostic).

    Uses the view's exact depth with the dataset-wide sigma; NaN when the view
    has no valid depth.
    """
    from .geometry import generate_rays
    from .losses import discretize_gaussian_batch
    from .pipeline import RayBatch, _deterministic_grids, _eval_head

    ok = dataset.valid[view]
    if not np.any(ok):
        return float("nan")
    rows, cols = np.nonzero(ok)
    pixels = np.stack([rows, cols], axis=1).astype(np.float64)
    jitter = np.full((pixels.shape[0], 2), 0.5)
    origins, dirs = generate_rays(dataset.intrinsics, dataset.poses[view], pixels, jitter)
    batch = RayBatch(origins=origins, dirs=dirs, t_near=dataset.t_near,
                     t_far=dataset.t_far, rgb=np.zeros((origins.shape[0], 3)))
    _, t_fine, _ = _deterministic_grids(batch, params_c, n_c, n_f)
    head = _eval_head(params_f, batch, t_fine)
    sigma = _dataset_sigma(dataset)
    target, valid = discretize_gaussian_batch(
        t_fine, dataset.t_near, dataset.t_far,
        dataset.depths[view][rows, cols], np.full(rows.size, sigma),
    )
    if not np.any(valid):
        return float("nan")
    diff = np.abs(head["pdf"][valid] - target[valid]).sum(axis=1)
    return float(diff.mean())


def _dataset_sigma(dataset):
    for table in dataset.targets:
        if table is not None and table.shape[0] > 0:
            return float(table[0, 3])
    return 1.0


def cmd_eval(args):
    params_c, params_f, cfg, threads = _checkpoint_with_config(args)
    dataset = load_dataset(args.dataset)
    out = _outdir(args.out)
    report = evaluate_checkpoint(params_c, params_f, cfg, dataset, args.split,
                                 threads=threads)
    (out / "eval.csv").write_text(report.to_csv(), encoding="ascii")
    (out / "eval.txt").write_text(report.to_text(), encoding="ascii")
    print(report.to_text(), end="")
    return 0


def run_ablation(dataset_dir, cfg, out):
    """Train the three gain arms with a shared seed and tabulate the metrics.

    Returns the list of (arm name, EvalReport) in arm order.
    """
    dataset = load_dataset(dataset_dir)
    ds_hash = dataset_sha256(dataset_dir)
    results = []
    for name, gains in ABLATION_ARMS:
        arm_cfg = _with_gains(cfg, gains)
        arm_out = _outdir(Path(out) / name.replace("+", "_"))
        run_training(dataset, arm_cfg, arm_out)
        params_c = field_mod.load_params(arm_out / "coarse.ckpt")
        params_f = field_mod.load_params(arm_out / "fine.ckpt")
        report = evaluate_checkpoint(
            params_c, params_f, arm_cfg, dataset, "test",
            threads=cfg.get("train", "threads"),
        )
        results.append((name, report))
        log.info("arm %-22s psnr=%.3f ssim=%.4f depth_rmse=%.4f",
                 name, report.psnr, report.ssim, report.depth_rmse)
    header = "arm,k_color,k_density,k_depth,psnr,ssim,depth_rmse,dataset_sha256"
    lines = [header]
    text = [f"{'arm':<22} {'psnr':>8} {'ssim':>8} {'depth_rmse':>11}", "-" * 52]
    for (name, report), (_, gains) in zip(results, ABLATION_ARMS):
        lines.append(
            f"{name},{gains.k_color!r},{gains.k_density!r},{gains.k_depth!r},"
            f"{report.psnr!r},{report.ssim!r},{report.depth_rmse!r},{ds_hash}"
        )
        text.append(f"{name:<22} {report.psnr:>8.3f} {report.ssim:>8.4f} "
                    f"{report.depth_rmse:>11.4f}")
    out = Path(out)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    (out / "ablation.txt").write_text("\n".join(text) + "\n", encoding="ascii")
    return results


def _with_gains(cfg, gains):
    from copy import deepcopy

    arm = deepcopy(cfg)
    arm.set("loss", "k_color", gains.k_color)
    arm.set("loss", "k_density", gains.k_density)
    arm.set("loss", "k_depth", gains.k_depth)
    return arm


def cmd_ablate(args):
    cfg = _load_run_config(args)
    out = _outdir(args.out)
    run_ablation(args.dataset, cfg, out)
    _snapshot(cfg, out)
    print((out / "ablation.txt").read_text(), end="")
    return 0


_COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "render": cmd_render,
    "eval": cmd_eval, "ablate": cmd_ablate,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (DivergenceError, NumericError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
