"""Command-line interface.

Exit codes: 0 success, 1 contract/config/usage error, 2 numerical failure.
``--threads N`` must be handled before numpy loads, so heavy imports happen
inside the subcommand handlers.
"""

import argparse
import os
import sys


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _build_parser():
    parser = _Parser(prog="frustumssc", description=__doc__)
    parser.add_argument(
        "--threads",
        type=int,
        default=0,
        help="cap BLAS threads (1 guarantees bit-determinism); set before numpy loads",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[], help="generate synthetic scene files")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--difficulty", default="medium")
    p.add_argument("--config", default=None, help="config JSON for camera/grid (defaults otherwise)")

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--resume", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", default=None, help="metrics CSV path (stdout otherwise)")
    p.add_argument("--force", action="store_true", help="ignore config digest mismatch")
    p.add_argument("--config", default=None, help="override the checkpoint's embedded config")

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--module", default="all", choices=["all", "numerics", "geometry", "ssm", "encoder2d", "decoder3d"])

    p = sub.add_parser("inspect-order", help="dump a frustum order as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--scale", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _cmd_gen_scenes(args):
    from .config import RunConfig
    from .scenes import generate_scene, save_scene

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    os.makedirs(args.out, exist_ok=True)
    cam, grid = cfg.cam(), cfg.grid()
    for i in range(args.count):
        sample = generate_scene(args.seed + i, cam, grid, cfg.n_classes, args.difficulty)
        save_scene(sample, os.path.join(args.out, f"scene_{i:04d}.fssc"))
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _cmd_train(args):
    from .config import RunConfig
    from .train import train

    cfg = RunConfig.load(args.config)
    summary = train(cfg, args.out, resume=args.resume, log=print)
    print(
        f"done: final iou {summary['final_iou']:.4f} miou {summary['final_miou']:.4f} "
        f"(best miou {summary['best_miou']:.4f}); metrics at {summary['csv_path']}"
    )
    return 0


def _cmd_eval(args):
    from .config import RunConfig
    from .scenes import load_scene
    from .train import evaluate_to_rows, load_model

    override = RunConfig.load(args.config) if args.config else None
    model, _ = load_model(args.ckpt, force=args.force, config=override)
    names = sorted(
        os.path.join(args.scenes, n) for n in os.listdir(args.scenes) if n.endswith(".fssc")
    )
    scenes = [load_scene(n) for n in names]
    rows, conf = evaluate_to_rows(model, scenes)
    text = "\n".join(",".join(row) for row in rows) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    print(f"iou {conf.iou():.4f} miou {conf.miou():.4f} over {len(scenes)} scenes", file=sys.stderr)
    return 0


def _cmd_gradcheck(args):
    from .gradsuite import run_suite

    failures = run_suite(args.module, report=print)
    if failures:
        print(f"{failures} gradient check(s) exceeded tolerance", file=sys.stderr)
        return 2
    print("all gradient checks passed")
    return 0


def _cmd_inspect_order(args):
    import numpy as np

    from .. import geometry
    from ..decoder3d import build_frustum_order
    from .config import RunConfig

    cfg = RunConfig.load(args.config)
    if args.scale < 0 or args.scale >= cfg.n_stages:
        from ..errors import ConfigError

        raise ConfigError(f"scale must be in 0..{cfg.n_stages - 1}, got {args.scale}")
    grid = cfg.grid().downsample(2**args.scale)
    cam = cfg.cam()
    order = build_frustum_order(
        grid,
        cam,
        bin_u=cfg.feature_scale * 2**args.scale,
        bin_v=cfg.feature_scale * 2**args.scale,
        depth_innermost=cfg.depth_innermost,
        scale_id=args.scale,
    )
    coords = geometry.frustum_coords(grid, cam)
    ijk = np.stack(np.unravel_index(np.arange(grid.num_voxels), grid.dims), axis=1)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("linear_index,i,j,k,u,v,d,rank\n")
        for lin in range(grid.num_voxels):
            i, j, k = ijk[lin]
            f.write(
                f"{lin},{i},{j},{k},{coords.u[lin]:.6f},{coords.v[lin]:.6f},"
                f"{coords.d[lin]:.6f},{order.inv_perm[lin]}\n"
            )
    print(f"wrote order for scale {args.scale} ({grid.num_voxels} voxels) to {args.out}")
    return 0


_COMMANDS = {
    "gen-scenes": _cmd_gen_scenes,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "inspect-order": _cmd_inspect_order,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    # honor --threads before numpy is imported anywhere
    if "--threads" in argv:
        idx = argv.index("--threads")
        if idx + 1 < len(argv) and argv[idx + 1].isdigit() and int(argv[idx + 1]) > 0:
            for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = argv[idx + 1]

    args = _build_parser().parse_args(argv)
    from ..errors import ConfigError, ContractError, DimensionError, NumericalError

    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ContractError, DimensionError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
