"""Command-line entry point ``resrecon``.

Exit codes: 0 success, 2 configuration or input error, 3 failed benchmark cells.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bench import ConfigError, ExperimentConfig, plot_curves, run_experiment, tomllib, _json_default
from .metrics import psnr, ssim_sagittal_avg

EXIT_OK, EXIT_CONFIG, EXIT_CELLS = 0, 2, 3

log = logging.getLogger("resrecon")


def _load_toml(path) -> dict:
    if path is None:
        return {}
    try:
        return tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _need_out(args):
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


def cmd_phantom(args, conf):
    from .volume import generate_phantom
    dims = tuple(args.dims or conf.get("dims", (64, 64, 64)))
    v = float(args.voxel or conf.get("voxel_size", 1.0))
    vol = generate_phantom(args.seed, dims, int(conf.get("n_ellipsoids", args.ellipsoids)), (v, v, v))
    io.write_cvol(vol, _need_out(args))


def cmd_coilmaps(args, conf):
    from .volume import synth_coil_maps
    dims = tuple(args.dims or conf.get("dims", (64, 64, 64)))
    v = float(args.voxel or conf.get("voxel_size", 1.0))
    maps = synth_coil_maps(dims, int(args.coils or conf.get("coils", 8)), args.seed, (v, v, v))
    io.write_maps(maps, _need_out(args))


def cmd_mask(args, conf):
    from .sampling import make_mask
    shape = tuple(args.shape or conf.get("shape", (64, 64)))
    kind = args.kind or conf.get("kind", "poisson")
    R = float(args.R or conf.get("R", 4.0))
    acs = tuple(args.acs) if args.acs else conf.get("acs")
    mask = make_mask(kind, shape, R, acs, args.seed, int(args.readout or conf.get("readout_len", 1)))
    io.write_mask(mask, _need_out(args))
    print(json.dumps({"kind": mask.kind, "requested_R": R, "achieved_R": mask.achieved_R}))


def cmd_simulate(args, conf):
    from .operators import forward
    vol = io.read_cvol(args.volume)
    maps = io.read_maps(args.maps)
    mask = io.read_mask(args.mask)
    mask = type(mask)(mask.pattern, vol.dims[0], mask.acs, mask.kind, mask.achieved_R)
    sigma = float(args.noise if args.noise is not None else conf.get("noise_sigma", 0.0))
    io.write_cksp(forward(vol, maps, mask, sigma, seed=args.seed), _need_out(args))


def cmd_train(args, conf):
    from .diffusion.data import extract_slices
    from .diffusion.training import train
    from .diffusion.unet import DenoiserConfig
    from .priors import PriorSpec, train_prior

    out = _need_out(args)
    spec_d = dict(conf.get("prior", conf))
    if args.steps:
        spec_d["steps"] = args.steps
    if args.diverse:
        spec_d["diverse"] = True
    spec_d.setdefault("seed", args.seed)
    if args.volumes:
        spec = PriorSpec(**{k: v for k, v in spec_d.items() if k in PriorSpec.__dataclass_fields__})
        cfg = DenoiserConfig(**spec.model, diverse=spec.diverse)
        ds = extract_slices([io.read_cvol(p) for p in args.volumes])
        ckpt = train(cfg, ds, spec.steps, seed=spec.seed, lr=spec.lr, batch_size=spec.batch_size,
                     ema_start=spec.ema_start, factor_range=tuple(spec.factor_range))
    else:
        try:
            spec = PriorSpec(**spec_d)
        except TypeError as e:
            raise ConfigError(f"bad prior config: {e}") from e
        ckpt = train_prior(spec)
    ckpt.save(out)


def cmd_recon(args, conf):
    from .baselines import SamplerConfig, reconstruct_dds3d, reconstruct_l1wavelet
    from .diffusion.training import Checkpoint
    from .operators import scale_measurements, zero_filled
    from .variational import ReconConfig, reconstruct_variational

    out = _need_out(args)
    method = args.method or conf.get("method", "variational")
    opts = dict(conf.get(method, {}))
    ksp, _ = scale_measurements(io.read_cksp(args.ksp), io.read_maps(args.maps))
    maps = io.read_maps(args.maps)
    run_log: dict = {"method": method}
    ckpt_path = args.ckpt or conf.get("checkpoint")
    try:
        if method in ("variational", "dds"):
            if not ckpt_path:
                raise ConfigError(f"method {method} needs --ckpt")
            ckpt = Checkpoint.load(ckpt_path)
            opts.setdefault("seed", args.seed)
            if method == "variational":
                vol = reconstruct_variational(ksp, maps, ckpt, ReconConfig(**opts), run_log=run_log)
            else:
                vol = reconstruct_dds3d(ksp, maps, None, ckpt, SamplerConfig(**opts), run_log=run_log)
        elif method == "l1_wavelet":
            vol = reconstruct_l1wavelet(ksp, maps, None, float(opts.get("mu", 0.01)),
                                        int(opts.get("iters", 100)), run_log=run_log)
        elif method == "zero_filled":
            vol = zero_filled(ksp, maps)
        else:
            raise ConfigError(f"unknown method {method!r}")
    except TypeError as e:
        raise ConfigError(f"bad {method} options: {e}") from e
    io.write_cvol(vol, out)
    out.with_name("run.json").write_text(json.dumps(run_log, indent=1, default=_json_default))


def cmd_eval(args, conf):
    recon, ref = io.read_cvol(args.recon), io.read_cvol(args.ref)
    p = psnr(recon, ref)
    res = {"psnr_db": p, "identical": p is None, "ssim": ssim_sagittal_avg(recon, ref)}
    text = json.dumps(res)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")


def cmd_bench(args, conf):
    if not args.config:
        raise ConfigError("bench needs --config")
    cfg = ExperimentConfig.from_toml(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed_given:
        cfg.seed = args.seed
    path = run_experiment(cfg)
    with path.open(newline="") as f:
        failed = [r for r in csv.DictReader(f) if r["error"] and r["error"] != "identical"]
    print(path)
    if failed:
        log.error("%d cell(s) failed", len(failed))
        return EXIT_CELLS
    return EXIT_OK


def cmd_plot(args, conf):
    plot_curves(args.csv, args.x or conf.get("x", "R"), _need_out(args))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="resrecon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write a synthetic complex phantom (.cvol)")
    s.add_argument("--dims", type=int, nargs=3)
    s.add_argument("--voxel", type=float)
    s.add_argument("--ellipsoids", type=int, default=12)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("coilmaps", parents=[common], help="write synthetic coil sensitivities (.maps)")
    s.add_argument("--dims", type=int, nargs=3)
    s.add_argument("--voxel", type=float)
    s.add_argument("--coils", type=int)
    s.set_defaults(func=cmd_coilmaps)

    s = sub.add_parser("mask", parents=[common], help="write an undersampling mask (.cmsk)")
    s.add_argument("--kind", choices=("poisson", "gaussian", "full"))
    s.add_argument("--shape", type=int, nargs=2)
    s.add_argument("--R", type=float)
    s.add_argument("--acs", type=int, nargs=2)
    s.add_argument("--readout", type=int)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("simulate", parents=[common], help="simulate multicoil k-space (.cksp)")
    s.add_argument("--volume", required=True)
    s.add_argument("--maps", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--noise", type=float)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train a slice diffusion prior")
    s.add_argument("--volumes", nargs="*", help=".cvol training volumes (default: phantoms)")
    s.add_argument("--steps", type=int)
    s.add_argument("--diverse", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("recon", parents=[common], help="reconstruct a volume from k-space")
    s.add_argument("--ksp", required=True)
    s.add_argument("--maps", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--method", choices=("variational", "l1_wavelet", "dds", "zero_filled"))
    s.set_defaults(func=cmd_recon)

    s = sub.add_parser("eval", parents=[common], help="PSNR and sagittal SSIM against a reference")
    s.add_argument("--recon", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="run an experiment matrix to CSV")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("plot", parents=[common], help="plot PSNR curves from a results CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--x", choices=("R", "shift"))
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        conf = _load_toml(args.config) if args.command != "bench" else {}
        code = args.func(args, conf)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
