"""Command line front end for the experiment pipeline.

Every subcommand takes --config (a JSON experiment config); --seed, --out
and --threads override the config's seed list, output directory and worker
count without editing the file.  A typical session:

    alignlab gen-data   --config exp.json
    alignlab sft        --config exp.json
    alignlab train-probe --config exp.json
    alignlab train      --config exp.json --seed 0
    alignlab eval       --config exp.json --checkpoint out/train/.../final.ckpt
    alignlab noise-sweep --config exp.json --threads 4
"""

import argparse
import json
import sys
from dataclasses import replace

from . import harness
from .harness import ExperimentConfig, Workspace


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None,
                   help="run only this seed (overrides the config's list)")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes for grid commands")


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1, default=str))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="alignlab",
        description="desk-scale preference-optimization laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {
        "gen-data": "generate the synthetic dataset family",
        "sft": "pre-train reference checkpoints on chosen responses",
        "train-probe": "fit the safety probe and write subspace masks",
        "train": "one aligned preference-training run",
        "eval": "evaluate a checkpoint on a prompt suite",
        "noise-sweep": "label-noise robustness grid",
        "ablate-geometry": "mask-mode ablation grid",
        "figure1": "concentration curve of worst-case loss increase",
        "diagnose": "geometry report for a checkpoint",
    }
    parsers = {}
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        parsers[name] = p

    parsers["train"].add_argument("--kind", default=None,
                                  help="loss kind override (dpo, ipo, cdpo, "
                                       "rdpo, drdpo, rm_bce)")
    parsers["train"].add_argument("--mode", default=None,
                                  help="mask mode override (none, random, "
                                       "uniform, selective)")
    parsers["train"].add_argument("--flip-rate", type=float, default=None)
    parsers["eval"].add_argument("--checkpoint", required=True)
    parsers["eval"].add_argument("--suite", default="in_dist",
                                 choices=list(harness.SUITES))
    parsers["noise-sweep"].add_argument("--rates", type=float, nargs="+",
                                        default=None)
    parsers["diagnose"].add_argument("--checkpoint", required=True)
    parsers["diagnose"].add_argument("--mask", default=None,
                                     help="mask JSON (default: the config's "
                                          "mode for the checkpoint's seed)")

    args = parser.parse_args(argv)
    cfg = _load(args)

    if args.command == "gen-data":
        _emit(harness.cmd_gen_data(cfg))
    elif args.command == "sft":
        _emit(harness.cmd_sft(cfg))
    elif args.command == "train-probe":
        _emit(harness.cmd_train_probe(cfg))
    elif args.command == "train":
        record = harness.cmd_train(cfg, kind=args.kind, mode=args.mode,
                                   flip_rate=args.flip_rate)
        _emit(record.to_dict())
        print(f"run dir: {Workspace(cfg).run_dir(record.label)}", file=sys.stderr)
    elif args.command == "eval":
        _emit(harness.cmd_eval(cfg, args.checkpoint, suite=args.suite))
    elif args.command == "noise-sweep":
        out = harness.cmd_noise_sweep(cfg, rates=args.rates,
                                      threads=args.threads)
        print(out)
    elif args.command == "ablate-geometry":
        print(harness.cmd_ablate_geometry(cfg, threads=args.threads))
    elif args.command == "figure1":
        print(harness.cmd_figure1(cfg))
    elif args.command == "diagnose":
        report = harness.cmd_diagnose(cfg, args.checkpoint, mask_path=args.mask)
        _emit(report.to_dict())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
