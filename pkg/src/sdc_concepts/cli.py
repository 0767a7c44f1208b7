"""Command-line entry point: ``sdc <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline, reporter, runtime, synthlab
from .errors import SDCError

log = logging.getLogger("sdc_concepts")


def _parent():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON pipeline config; flags override its fields")
    p.add_argument("--seed", type=int, help="seed for every stochastic stage")
    p.add_argument("--threads", type=int, help="math library threads (fallback: SDC_THREADS)")
    p.add_argument("--strict", action="store_true", default=None, help="single-threaded, bit-reproducible run")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="input data directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _parent()
    parser = argparse.ArgumentParser(prog="sdc", description="Shared decodable concept analysis pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset with planted concepts")
    s.add_argument("--participants", type=int)
    s.add_argument("--stimuli", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--embed-dim", type=int)
    s.add_argument("--concepts", type=int, dest="true_concepts")
    s.add_argument("--support-size", type=int)
    s.add_argument("--extra-voxels", type=int)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--target-nc", type=float, help="pick noise sigma so coding voxels reach this noise ceiling")
    s.add_argument("--mode", choices=synthlab.CONSISTENCY_MODES, dest="consistency_mode")
    s.add_argument("--no-nonlinearity", action="store_false", dest="nonlinearity", default=None)

    for name in pipeline.STAGES:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "eval-topk":
            p.add_argument("--k", type=int, action="append", dest="ks", help="k to evaluate (repeatable)")
        if name == "fit-sdc":
            p.add_argument("--components", type=int, dest="sdc_c")
            p.add_argument("--iters", type=int, dest="sdc_iters")
        if name == "fit-masks":
            p.add_argument("--alpha", type=float, dest="lasso_alpha")
        if name in ("fit-masks", "specificity", "consistency"):
            p.add_argument("--head", action="append", dest="mask_heads", help="head to build masks for (repeatable)")
        if name == "report":
            p.add_argument("--perplexity", type=float, dest="tsne_perplexity")
            p.add_argument("--iterations", type=int, dest="tsne_iterations")
    p = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    p.add_argument("--head", action="append", dest="mask_heads")
    return parser


def load_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    if args.seed is not None:
        cfg.set_seed(args.seed)
    if args.data:
        cfg.data_dir = args.data
    if args.out:
        cfg.out_dir = args.out
    if args.strict is not None:
        cfg.strict = args.strict
    if args.threads is not None:
        cfg.threads = args.threads
    for key in ("sdc_c", "sdc_iters", "lasso_alpha", "mask_heads", "tsne_perplexity", "tsne_iterations"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def run_synth(args):
    spec_fields = {}
    if args.config:
        spec_fields = json.loads(Path(args.config).read_text()).get("synth", {})
    spec = synthlab.SynthSpec(**spec_fields)
    for key in ("participants", "stimuli", "reps", "embed_dim", "true_concepts", "support_size", "extra_voxels",
                "noise_sigma", "consistency_mode", "nonlinearity", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(spec, key, value)
    if args.target_nc is not None:
        spec.noise_sigma = synthlab.sigma_for_noise_ceiling(spec, args.target_nc)
    out = Path(args.out or args.data or "data")
    files = synthlab.write_dataset(synthlab.generate(spec), out, spec)
    reporter.update_manifest(out, "synth", [str(f.relative_to(out)) for f in files], spec.to_json(),
                             {"synth": spec.seed})
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            with runtime.execution_mode(bool(args.strict), args.threads):
                return run_synth(args)
        cfg = load_config(args)
        with runtime.execution_mode(cfg.strict, cfg.threads):
            if args.command == "pipeline":
                pipeline.run_pipeline(cfg)
            else:
                kwargs = {"ks": args.ks} if args.command == "eval-topk" and args.ks else {}
                pipeline.run_stage(pipeline.Workspace(cfg), args.command, **kwargs)
        return 0
    except (SDCError, ValueError, OSError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
