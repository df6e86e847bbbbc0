"""Command-line interface: ``anatprior {synth,tensor,prior,fit,ppm,pipeline}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .glm import Chain
from .io import load_image, load_mask
from .pipeline import (RunConfig, bundled_config, fit_stage, load_prior, ppm_stage, prior_stage,
                       run_pipeline, tensor_stage)
from .synth import SynthSpec, load_dataset, synth_dataset
from .tensorfield import TensorField

logger = logging.getLogger("anatprior")


def _contrast(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"contrast must be comma-separated numbers, got {text!r}") from None


def _add_schedule(p):
    p.add_argument("--iters", type=int, help="total Gibbs iterations (default 10000)")
    p.add_argument("--warmup", type=int, help="discarded warm-up iterations (default 1000)")
    p.add_argument("--thin", type=int, help="thinning factor (default 5)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--ar-order", type=int, help="AR order p (default 1)")


def _add_prior(p):
    p.add_argument("--prior", choices=("ugl", "4dir", "anydir"), help="spatial prior scheme")
    p.add_argument("--alpha", type=float, help="ANYDIR angular exponent (default 12)")
    p.add_argument("--beta", type=float, help="ANYDIR distance exponent (default 5)")
    p.add_argument("--ugl-fallback", action="store_true", default=None,
                   help="use the 4-neighbour stencil at unoriented pixels")


def _add_ppm(p):
    p.add_argument("--contrast", type=_contrast, help="regressor weights, e.g. 0,1")
    p.add_argument("--effect-fraction", type=float, help="effect threshold as a fraction of the global mean (default 0.002)")
    p.add_argument("--ppm-threshold", type=float, help="probability threshold (default 0.8)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anatprior", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", type=Path, help="JSON synthetic spec (SynthSpec fields)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("tensor", help="estimate a structure-tensor field")
    p.add_argument("--image", type=Path, required=True, help="anatomical image (.f32 or .pgm)")
    p.add_argument("--mask", type=Path)
    p.add_argument("--downsample", type=int, default=1)
    p.add_argument("--grad-sigma", type=float, default=1.0)
    p.add_argument("--smooth-sigma", type=float, default=2.0)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("prior", help="build a Laplacian precision matrix (Matrix Market)")
    p.add_argument("--tensor", type=Path, help="tensor field (needed for 4dir/anydir)")
    p.add_argument("--mask", type=Path, help="mask PGM; defaults to the full tensor grid")
    _add_prior(p)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("fit", help="run the Gibbs sampler")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--prior-matrix", type=Path, required=True)
    _add_schedule(p)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("ppm", help="posterior probability maps from a chain")
    p.add_argument("--chain", type=Path, required=True, help="chain directory")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    _add_ppm(p)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("pipeline", help="all stages from one RunConfig")
    p.add_argument("--config", type=Path, help="RunConfig JSON (default: bundled synthetic config)")
    _add_prior(p)
    _add_schedule(p)
    _add_ppm(p)
    p.add_argument("--out-dir", type=Path, required=True)
    return parser


def _overrides(args) -> dict:
    keys = {"prior": "prior", "alpha": "alpha", "beta": "beta", "ugl_fallback": "ugl_fallback",
            "iters": "iters", "warmup": "warmup", "thin": "thin", "seed": "seed",
            "ar_order": "ar_order", "contrast": "contrast", "effect_fraction": "effect_fraction",
            "ppm_threshold": "ppm_threshold"}
    return {cfg_key: getattr(args, a) for a, cfg_key in keys.items()
            if getattr(args, a, None) is not None}


def cmd_synth(args):
    spec = json.loads(args.config.read_text()) if args.config else {}
    if args.seed is not None:
        spec["seed"] = args.seed
    ds = synth_dataset(SynthSpec.from_dict(spec))
    ds.save(args.out_dir)
    print(f"wrote dataset to {args.out_dir}")


def cmd_tensor(args):
    anat = load_image(args.image, args.mask)
    field = tensor_stage(anat, args.out_dir, args.grad_sigma, args.smooth_sigma, args.downsample)
    print(f"wrote {field.shape[0]}x{field.shape[1]} tensor field to {args.out_dir / 'tensor.f32'}")


def cmd_prior(args):
    defaults = RunConfig()
    scheme = args.prior or defaults.prior
    field = TensorField.load(args.tensor) if args.tensor else None
    if args.mask:
        mask = load_mask(args.mask)
    elif field is not None:
        mask = np.ones(field.shape, bool)
    else:
        raise ValueError("prior needs --mask or --tensor")
    prior = prior_stage(scheme, mask, field, args.out_dir,
                        args.alpha if args.alpha is not None else defaults.alpha,
                        args.beta if args.beta is not None else defaults.beta,
                        bool(args.ugl_fallback))
    print(f"wrote {prior.scheme} precision ({prior.n}x{prior.n}, nnz={prior.D.nnz}) to {args.out_dir / 'prior.mtx'}")


def cmd_fit(args):
    cfg = replace(RunConfig(), **_overrides(args))
    data = load_dataset(args.data, cfg.ar_order)
    prior = load_prior(args.prior_matrix, data.pixels.mask)
    chain = fit_stage(data, prior, args.out_dir, cfg.schedule, cfg.seed)
    print(f"stored {chain.n_draws} draws in {args.out_dir / 'chain'}")


def cmd_ppm(args):
    cfg = replace(RunConfig(), **_overrides(args))
    data = load_dataset(args.data, 0)
    chain = Chain.load(args.chain)
    summary = ppm_stage(chain, data, args.out_dir, cfg.contrast, cfg.effect_fraction, cfg.ppm_threshold)
    print(json.dumps(summary))


def cmd_pipeline(args):
    cfg = RunConfig.load(args.config) if args.config else bundled_config()
    cfg = replace(cfg, **_overrides(args))
    manifest = run_pipeline(cfg, args.out_dir)
    print(json.dumps(manifest["ppm"], indent=2))


COMMANDS = {"synth": cmd_synth, "tensor": cmd_tensor, "prior": cmd_prior, "fit": cmd_fit,
            "ppm": cmd_ppm, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"anatprior {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
