"""Command-line front end.

Exit codes: 0 success, 2 configuration error (bad flags, malformed or
unknown config keys), 3 verification failure (outlier injection missed its
magnitude target).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import harness
from .harness import ConfigError, ExperimentConfig, InjectionError
from .model import build_model, save_weights


def _add_common_flags(sp: argparse.ArgumentParser):
    sp.add_argument("--config", metavar="PATH",
                    help="JSON experiment config (defaults apply without it)")
    sp.add_argument("--seed", type=int, metavar="N",
                    help="run only this seed instead of the config seed list")
    sp.add_argument("--bits", metavar="WxAy",
                    help="bit setting override, e.g. W6A6")
    sp.add_argument("--method", choices=("minmax", "mse", "pcc"),
                    help="calibration method override")
    sp.add_argument("--recon", choices=("none", "local", "par"),
                    help="reconstruction mode override")
    sp.add_argument("--out", metavar="PATH", help="output file")
    sp.add_argument("--full-budget", action="store_true",
                    help="full iteration budget (default is the 0.1x "
                         "desk-scale budget)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="segptq",
        description="Post-training quantization experiments on a miniature "
                    "promptable segmenter.")
    sub = p.add_subparsers(dest="command", required=True)
    specs = [
        ("gen-model", "build a model and save its weights"),
        ("gen-data", "generate the synthetic calibration set"),
        ("calibrate", "choose clipping bounds; emit the per-tensor report"),
        ("reconstruct", "calibrate then learn bounds and rounding"),
        ("evaluate", "full pipeline per (seed, method, bits)"),
        ("sweep-theta", "focus-threshold sweep with an MSE baseline"),
        ("sweep-granularity", "reconstruction objective/granularity grid"),
        ("report", "re-emit a JSON report as json or csv"),
    ]
    for name, help_text in specs:
        sp = sub.add_parser(name, help=help_text)
        if name == "report":
            sp.add_argument("input", metavar="REPORT_JSON",
                            help="existing report file to convert")
        _add_common_flags(sp)
    return p


def _config_from_args(args) -> ExperimentConfig:
    cfg = (harness.load_config(args.config) if args.config
           else ExperimentConfig())
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.bits is not None:
        harness.parse_bits(args.bits)
        updates["bits"] = [args.bits]
    if args.method is not None:
        updates["methods"] = [args.method]
    if args.recon is not None:
        updates["recon"] = args.recon
    if args.full_budget:
        updates["iter_scale"] = 1.0
    if args.out is not None:
        updates["out"] = args.out
    return replace(cfg, **updates) if updates else cfg


def _write_or_print(report: dict, out: str | None):
    if out:
        fmt = "csv" if out.endswith(".csv") else "json"
        harness.emit_report(report, fmt, out)
    else:
        sys.stdout.write(harness.report_to_json(report))


def _cmd_gen_model(cfg: ExperimentConfig):
    if not cfg.out:
        raise ConfigError("gen-model needs --out for the weights file")
    model = build_model(replace(cfg.model, seed=cfg.seeds[0]))
    save_weights(model, cfg.out)
    return 0


def _cmd_gen_data(cfg: ExperimentConfig):
    if not cfg.out:
        raise ConfigError("gen-data needs --out for the dataset file")
    seed = cfg.seeds[0]
    images = harness.gen_synthetic_images(cfg.num_images, seed,
                                          image_size=cfg.model.image_size)
    prompt_sets = harness.gen_prompts(images, seed)
    np.savez(cfg.out, images=np.stack(images),
             prompts=json.dumps([[p.to_dict() for p in ps]
                                 for ps in prompt_sets]))
    return 0


def _cmd_calibrate(cfg: ExperimentConfig):
    from .calibration import calibrate_model

    records = []
    for seed in cfg.seeds:
        ctx = harness.prepare_run(cfg, seed)
        for bits in cfg.bits:
            for method in cfg.methods:
                wb, ab = harness.parse_bits(bits)
                policy = harness.policy_for(method, wb, ab, cfg.theta)
                result = calibrate_model(ctx.model, ctx.images,
                                         ctx.prompt_sets, policy,
                                         observations=ctx.observations)
                dists = harness.qk_module_dists(ctx.observations, result.env,
                                                ab, cfg.theta)
                records.append({
                    "seed": seed, "method": method, "bits": bits,
                    "tensors": result.report,
                    "dist_pcc": dists,
                    "outlier_ratio": ({h: r["ratio"] for h, r
                                       in ctx.injection.records.items()}
                                      if ctx.injection else None),
                })
    report = {"schema_version": harness.SCHEMA_VERSION, "kind": "calibrate",
              "config": harness.config_to_dict(cfg), "records": records}
    _write_or_print(report, cfg.out)
    return 0


def _cmd_reconstruct(cfg: ExperimentConfig):
    if cfg.recon == "none":
        cfg = replace(cfg, recon="par")
    report = harness.run_experiment(replace(cfg, out=None))
    report["kind"] = "reconstruct"
    _write_or_print(report, cfg.out)
    return 0


def _cmd_evaluate(cfg: ExperimentConfig):
    report = harness.run_experiment(replace(cfg, out=None))
    _write_or_print(report, cfg.out)
    return 0


def _cmd_sweep_theta(cfg: ExperimentConfig):
    report = harness.sweep_theta(replace(cfg, out=None))
    _write_or_print(report, cfg.out)
    return 0


def _cmd_sweep_granularity(cfg: ExperimentConfig):
    report = harness.sweep_granularity(replace(cfg, out=None))
    _write_or_print(report, cfg.out)
    return 0


def _cmd_report(cfg: ExperimentConfig, input_path: str):
    try:
        with open(input_path) as f:
            report = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read report {input_path}: {e}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"{input_path} is not valid JSON: {e}") from e
    if not isinstance(report, dict) or "records" not in report:
        raise ConfigError(f"{input_path} does not look like a report")
    _write_or_print(report, cfg.out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "gen-model":
            return _cmd_gen_model(cfg)
        if args.command == "gen-data":
            return _cmd_gen_data(cfg)
        if args.command == "calibrate":
            return _cmd_calibrate(cfg)
        if args.command == "reconstruct":
            return _cmd_reconstruct(cfg)
        if args.command == "evaluate":
            return _cmd_evaluate(cfg)
        if args.command == "sweep-theta":
            return _cmd_sweep_theta(cfg)
        if args.command == "sweep-granularity":
            return _cmd_sweep_granularity(cfg)
        if args.command == "report":
            return _cmd_report(cfg, args.input)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except InjectionError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
