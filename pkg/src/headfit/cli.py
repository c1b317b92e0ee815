"""Command-line interface.

Subcommands: synth-model, render, crops, fit, evaluate, refit-mesh,
transfer-deform, dice. Exit codes: 0 success, 1 contract violation,
2 I/O or file-format error. All randomness flows from --seed, and every
run writes a run.json next to its outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ContractError, FormatError, NumericalError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; 1 guarantees reproducibility")
    p.add_argument("--out-dir", default=os.environ.get("HEADFIT_OUT_DIR", "."),
                   help="directory for outputs and run.json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headfit",
        description="Full-head morphable model fitting and benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-model", help="write a deterministic synthetic model asset")
    p.add_argument("--vertices", type=int, default=642, help="minimum vertex count")
    p.add_argument("--dims", type=int, nargs=3, default=[100, 50, 50],
                   metavar=("N_BETA", "N_PSI", "N_ALPHA"))
    p.add_argument("--out", default="model.hmm")
    _add_common(p)

    p = sub.add_parser("render", help="render params into color/silhouette/landmarks")
    p.add_argument("--asset", required=True)
    p.add_argument("--params", help="params JSON; default all-zero with unit camera")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--sigma", type=float, default=0.01)
    _add_common(p)

    p = sub.add_parser("crops", help="multi-scale square crops of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True, help="landmarks CSV")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--skin-mask")
    p.add_argument("--bald-mask")
    p.add_argument("--crop-size", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("fit", help="fit parameters to an observation manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--asset", required=True)
    p.add_argument("--iterations", type=int, default=400)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--sigma", type=float, default=0.015)
    p.add_argument("--shared-beta", action="store_true")
    p.add_argument("--scale-weight", type=float, default=None,
                   help="scale-consistency weight (default from LossWeights)")
    p.add_argument("--dice-weight", type=float, default=None)
    _add_common(p)

    p = sub.add_parser("evaluate", help="benchmark a predicted mesh against ground truth")
    p.add_argument("--pred", required=True, help="predicted mesh OBJ")
    p.add_argument("--gt", required=True, help="ground-truth mesh OBJ")
    p.add_argument("--protocol", choices=["now-style", "fullhead-region"],
                   default="now-style")
    p.add_argument("--alignment", choices=["umeyama", "icp", "none"], default="umeyama")
    p.add_argument("--asset", help="asset providing the region table")
    p.add_argument("--region", default="upper_head", help="region name in the asset")
    p.add_argument("--region-file", help="plain-text file: one 0-based index per line")
    _add_common(p)

    p = sub.add_parser("refit-mesh", help="recover blendshape parameters for a mesh")
    p.add_argument("--target", required=True, help="mesh OBJ in model topology")
    p.add_argument("--asset", required=True)
    p.add_argument("--ridge", type=float, default=0.0, help="looseness of the fit")
    p.add_argument("--out", default="refit_params.json")
    _add_common(p)

    p = sub.add_parser("transfer-deform", help="carry a manual edit onto another fit")
    p.add_argument("--refit-neutral", required=True)
    p.add_argument("--manual-neutral", required=True)
    p.add_argument("--refit-expr", required=True)
    p.add_argument("--out", default="transferred.obj")
    _add_common(p)

    p = sub.add_parser("dice", help="dice loss between two mask PNGs")
    p.add_argument("mask_a")
    p.add_argument("mask_b")
    p.add_argument("--epsilon", type=float, default=1e-6)
    _add_common(p)

    return parser


def _settings(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "command"}


def _cmd_synth_model(args) -> int:
    from . import io
    from .model import synth_model

    asset = synth_model(args.seed, args.vertices, dims=tuple(args.dims))
    out = Path(args.out_dir) / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_asset(asset, out)
    print(f"wrote {out} (V={asset.n_vertices}, F={len(asset.faces)}, dims={asset.dims})")
    return 0


def _cmd_render(args) -> int:
    from . import io
    from .losses import Landmarks2D
    from .model import HeadParams
    from .render import render_head

    asset = io.load_asset(args.asset)
    params = io.load_params(args.params) if args.params else HeadParams.zeros(asset.dims)
    if params.dims != asset.dims:
        raise ContractError(
            f"params dims {params.dims} do not match asset dims {asset.dims}"
        )
    out, _ = render_head(params, asset, args.size, args.sigma)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.save_png_image(out.color, out_dir / "color.png")
    io.save_png_mask(out.silhouette, out_dir / "silhouette.png")
    io.save_landmarks_csv(Landmarks2D(out.landmarks2d), out_dir / "landmarks.csv")
    print(f"wrote color.png, silhouette.png, landmarks.csv to {out_dir}")
    return 0


def _cmd_crops(args) -> int:
    from . import io
    from .fitting import generate_crops

    image = io.load_png_image(args.image)
    landmarks = io.load_landmarks_csv(args.landmarks)
    skin = io.load_png_mask(args.skin_mask) if args.skin_mask else None
    bald = io.load_png_mask(args.bald_mask) if args.bald_mask else None
    crops = generate_crops(image, landmarks, args.levels, skin_mask=skin,
                           bald_mask=bald, out_size=args.crop_size)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for obs in crops:
        k = obs.crop_level
        io.save_png_image(obs.image, out_dir / f"crop_{k}.png")
        io.save_landmarks_csv(obs.landmarks, out_dir / f"landmarks_{k}.csv")
        io.save_png_mask(obs.skin_mask, out_dir / f"skin_mask_{k}.png")
        if obs.bald_skin_mask is not None:
            io.save_png_mask(obs.bald_skin_mask, out_dir / f"bald_mask_{k}.png")
    print(f"wrote {len(crops)} crops to {out_dir}")
    return 0


def _cmd_fit(args) -> int:
    from . import io
    from .fitting import FitConfig, fit
    from .losses import LossWeights

    asset = io.load_asset(args.asset)
    grid = io.load_manifest(args.manifest, shared_shape=args.shared_beta)
    weights = LossWeights()
    if args.scale_weight is not None:
        weights.scale = args.scale_weight
    if args.dice_weight is not None:
        weights.dice = args.dice_weight
    config = FitConfig(
        weights=weights,
        iterations=args.iterations,
        learning_rate=args.learning_rate,
        sigma=args.sigma,
        seed=args.seed,
    )
    report = fit(grid, asset, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.save_fit_report(report, out_dir / "fit_report.json")
    io.save_trajectory_csv(report, out_dir / "trajectory.csv")
    print(
        f"fit {len(grid.observations)} observation(s): total "
        f"{report.initial_total:.6g} -> {report.final_total:.6g} "
        f"in {report.wall_clock_sec:.1f}s; wrote fit_report.json, trajectory.csv"
    )
    return 0


def _cmd_evaluate(args) -> int:
    import numpy as np

    from . import io
    from .registration import (
        RigidTransform, evaluate_to_mesh, icp_refine, region_error, umeyama_align,
    )

    pred = io.load_obj(args.pred)
    gt = io.load_obj(args.gt)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.protocol == "fullhead-region":
        if args.region_file:
            region = np.array(
                [int(l) for l in Path(args.region_file).read_text().split()],
                dtype=np.int64,
            )
        elif args.asset:
            asset = io.load_asset(args.asset)
            if args.region not in asset.regions:
                raise ContractError(f"asset has no region named {args.region!r}")
            region = asset.regions[args.region]
        else:
            raise ContractError(
                "fullhead-region protocol needs --region-file or --asset/--region"
            )
        report = region_error(pred, gt, region, align=args.alignment != "none")
    else:
        transform = RigidTransform.identity()
        if args.alignment != "none":
            if pred.vertices.shape == gt.vertices.shape:
                transform = umeyama_align(pred.vertices, gt.vertices)
            if args.alignment == "icp":
                transform = icp_refine(pred, gt.vertices, init=transform, iters=30)
        aligned = pred.copy()
        aligned.vertices = transform.apply(pred.vertices)
        report = evaluate_to_mesh(
            gt.vertices, aligned, alignment=args.alignment, protocol="now-style"
        )
    io.save_eval_report(report, out_dir / "eval_report.json")
    io.save_curve_csv(report, out_dir / "curve.csv")
    print(
        f"{args.protocol}: median {report.median_mm:.6g} mm, mean "
        f"{report.mean_mm:.6g} mm, std {report.std_mm:.6g} mm; "
        f"wrote eval_report.json, curve.csv"
    )
    return 0


def _cmd_refit_mesh(args) -> int:
    from . import io
    from .registration import refit_model_to_mesh

    asset = io.load_asset(args.asset)
    target = io.load_obj(args.target)
    params = refit_model_to_mesh(target, asset, ridge=args.ridge)
    out = Path(args.out_dir) / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_params(params, out)
    print(f"wrote {out} (ridge={args.ridge})")
    return 0


def _cmd_transfer_deform(args) -> int:
    from . import io
    from .registration import displacement_transfer

    refit_neutral = io.load_obj(args.refit_neutral)
    manual_neutral = io.load_obj(args.manual_neutral)
    refit_expr = io.load_obj(args.refit_expr)
    moved = displacement_transfer(refit_neutral, manual_neutral, refit_expr)
    out = Path(args.out_dir) / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_obj(moved, out)
    print(f"wrote {out}")
    return 0


def _cmd_dice(args) -> int:
    from . import io
    from .losses import dice_loss

    a = io.load_png_mask(args.mask_a)
    b = io.load_png_mask(args.mask_b)
    print(dice_loss(a, b, args.epsilon))
    return 0


_COMMANDS = {
    "synth-model": _cmd_synth_model,
    "render": _cmd_render,
    "crops": _cmd_crops,
    "fit": _cmd_fit,
    "evaluate": _cmd_evaluate,
    "refit-mesh": _cmd_refit_mesh,
    "transfer-deform": _cmd_transfer_deform,
    "dice": _cmd_dice,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads == 1:
        # pin BLAS pools before numpy spins up threads in the workers
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
    try:
        from . import io

        io.write_run_record(args.out_dir, args.command, _settings(args), args.seed)
        return _COMMANDS[args.command](args)
    except (ContractError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
