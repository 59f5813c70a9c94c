"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error.  Relative output
paths resolve under $OCC4D_RUN_DIR when it is set.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config


def _out(path: str) -> Path:
    p = Path(path)
    base = os.environ.get("OCC4D_RUN_DIR")
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occ4d")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate a synthetic OCG1 dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train-vae", help="train the occupancy VAE")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded numerics")

    p = sub.add_parser("encode", help="encode a dataset into a latent archive")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="decode one latent file to OCG1 (+BEV strip)")
    p.add_argument("--ckpt", required=True, help="VAE checkpoint")
    p.add_argument("--hexplane", required=True)
    p.add_argument("--out", required=True, help="output basename")
    p.add_argument("--bev", action="store_true")

    p = sub.add_parser("train-dit", help="train the latent denoiser")
    _add_config_args(p)
    p.add_argument("--archive", required=True)
    p.add_argument("--data", help="OCG1 dir (needed for command/trajectory/layout)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--deterministic", action="store_true")

    for name in ("sample", "inpaint", "outpaint", "forecast"):
        p = sub.add_parser(name)
        p.add_argument("--dit", required=True)
        p.add_argument("--vae", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("-w", type=float, default=None, help="guidance weight")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--no-ema", action="store_true")
        p.add_argument("--bev", action="store_true")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
        if name == "sample":
            p.add_argument("-n", type=int, default=None, help="number of samples")
            p.add_argument("--command")
            p.add_argument("--command-file")
            p.add_argument("--trajectory", help="CSV file with rows t,x,y")
            p.add_argument("--layout", help="OCG1 raster (Tl,Xl,Yl,1)")
            p.add_argument("--cond-hexplane", help="latent checkpoint")
            p.add_argument("--deterministic", action="store_true")
        if name in ("inpaint", "outpaint"):
            p.add_argument("--hexplane", required=True, help="input latent checkpoint")
        if name == "inpaint":
            p.add_argument("--mask", required=True, help="OCG1 raster (1,Xl,Yl,1)")
        if name == "outpaint":
            p.add_argument("--shift", type=int, required=True)
        if name == "forecast":
            p.add_argument("--context", required=True, help="context OCG1 sequence")

    p = sub.add_parser("eval", help="mIoU + feature metrics between two datasets")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--vae", help="VAE checkpoint for pooled features")
    p.add_argument("--out", required=True, help="report file")

    p = sub.add_parser("render-bev", help="render one frame of an OCG1 file to PNG")
    p.add_argument("--grid", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)

    return parser


def _dispatch(args: argparse.Namespace) -> None:
    import torch

    from . import runs
    from .occgrid import TOY_CLASSES, read_grid, render_bev, write_bev_png

    if getattr(args, "deterministic", False):
        torch.set_num_threads(1)

    cmd = args.command
    if cmd == "gen-toy":
        cfg = load_config(args.config, args.overrides)
        runs.gen_toy_dataset(cfg, _out(args.out), force=args.force)
    elif cmd == "train-vae":
        cfg = load_config(args.config, args.overrides)
        runs.train_vae(cfg, args.data, _out(args.out), resume=args.resume,
                       max_steps=args.max_steps)
    elif cmd == "encode":
        runs.encode_dataset(args.ckpt, args.data, _out(args.out))
    elif cmd == "decode":
        vae, _, _ = runs.load_vae(args.ckpt)
        h = runs.load_hexplane(args.hexplane)
        runs.decode_to_files(h, vae, _out(args.out), bev=args.bev)
    elif cmd == "train-dit":
        cfg = load_config(args.config, args.overrides)
        runs.train_dit(cfg, args.archive, _out(args.out), data_dir=args.data,
                       resume=args.resume, max_steps=args.max_steps)
    elif cmd == "sample":
        model, cfg = runs.load_denoiser(args.dit, use_ema=not args.no_ema)
        cond = runs._condition_from_files(
            cfg, cfg.plane_dims(), command=args.command,
            command_file=args.command_file, trajectory_file=args.trajectory,
            layout_file=args.layout, cond_hexplane_file=args.cond_hexplane)
        runs.run_sample(Path(args.dit), Path(args.vae), _out(args.out),
                        args.overrides, n=args.n, w=args.w, seed=args.seed,
                        cond=cond, bev=args.bev, use_ema=not args.no_ema,
                        deterministic=args.deterministic or None)
    elif cmd in ("inpaint", "outpaint", "forecast"):
        _run_application(args)
    elif cmd == "eval":
        report = runs.run_eval(Path(args.pred), Path(args.truth), _out(args.out),
                               vae_ckpt=Path(args.vae) if args.vae else None)
        for k, v in report.items():
            print(f"{k} = {v}")
    elif cmd == "render-bev":
        grid = read_grid(args.grid)
        write_bev_png(render_bev(grid, args.frame, TOY_CLASSES), _out(args.out))
    else:  # pragma: no cover
        raise ConfigError(f"unhandled command {cmd}")


def _run_application(args: argparse.Namespace) -> None:
    from . import runs
    from .conditioning import inpaint as do_inpaint
    from .conditioning import outpaint as do_outpaint
    from .config import apply_overrides
    from .diffusion import make_schedule

    model, cfg = runs.load_denoiser(args.dit, use_ema=not args.no_ema)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    vae, _, _ = runs.load_vae(args.vae)
    schedule = make_schedule(cfg.diffusion_steps)
    w = cfg.cfg_w if args.w is None else args.w
    seed = cfg.sample_seed if args.seed is None else args.seed
    out_dir = _out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.command == "forecast":
        context = read_grid(args.context)
        pred = runs.forecast(model, schedule, context, vae, w=w, seed=seed)
        from .occgrid import write_grid

        write_grid(pred, out_dir / "forecast.ocg")
        runs.write_run_record(out_dir, "forecast", cfg, {"context": args.context})
        return
    h_in = runs.load_hexplane(args.hexplane)
    if args.command == "inpaint":
        mask = runs.read_mask_file(args.mask, model.dims)
        h = do_inpaint(model, schedule, h_in, mask, w=w, seed=seed)
        name = "inpaint"
    else:
        h = do_outpaint(model, schedule, h_in, args.shift, w=w, seed=seed)
        name = "outpaint"
    runs.save_hexplane(h, out_dir / f"{name}.ock", meta={"seed": seed})
    runs.decode_to_files(h, vae, out_dir / name, bev=args.bev)
    runs.write_run_record(out_dir, name, cfg, {"hexplane": args.hexplane})


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        from . import runs
        from .checkpoint import CheckpointError
        from .hexplane import DimsError
        from .metrics import MetricInputError
        from .occgrid import GridDataError, GridFormatError

        data_errors = (runs.DataError, GridFormatError, GridDataError, DimsError,
                       CheckpointError, MetricInputError, FileNotFoundError, ValueError)
        if isinstance(exc, data_errors):
            print(f"data error: {exc}", file=sys.stderr)
            return 3
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
