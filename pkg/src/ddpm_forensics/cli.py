"""Command-line entry point.

Exit codes: 0 success, 2 partial failure (some models or rows failed), 1 fatal.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _load_cfg(args):
    from .harness import ExperimentConfig

    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def cmd_synth_data(args) -> int:
    from .data import synth_dataset, write_dataset

    images, labels = synth_dataset(args.n, args.size, _seed(args))
    path = write_dataset(_out(args, "data"), images, labels, seed=_seed(args), size=args.size)
    print(path)
    return EXIT_OK


def _dataset(path, cfg):
    from .data import read_dataset

    return read_dataset(path)[0] if path else cfg.load_dataset()


def cmd_train_clean(args) -> int:
    from .checkpoint import save_checkpoint
    from .denoiser import make_denoiser
    from .diffusion import TrainConfig, train_clean

    cfg = _load_cfg(args)
    sched = cfg.make_schedule()
    seed = _seed(args)
    model = make_denoiser(cfg.arch(), seed)
    tc = TrainConfig(**{**cfg.clean_train, "seed": seed, **({"steps": args.steps} if args.steps else {})})
    train_clean(model, _dataset(args.data, cfg), sched, tc)
    print(save_checkpoint(model, _out(args, "clean_model"), sched, seed=seed, role="clean"))
    return EXIT_OK


def _spec_from_args(args, sched, size):
    from .attacks import BackdoorSpec
    from .harness import build_spec

    if args.spec:
        return BackdoorSpec.from_json(args.spec, sched)
    return build_spec({"method": args.method, "trigger": args.trigger, "target": args.target,
                       "poison_rate": args.poison_rate, "gamma": args.gamma}, size)


def cmd_backdoor(args) -> int:
    from .attacks import train_backdoor
    from .checkpoint import load_checkpoint, save_checkpoint
    from .diffusion import TrainConfig

    cfg = _load_cfg(args)
    model, sched, _ = load_checkpoint(args.model)
    spec = _spec_from_args(args, sched, model.image_shape[-1])
    seed = _seed(args)
    tc = TrainConfig(**{**cfg.backdoor_train, "seed": seed, **({"steps": args.steps} if args.steps else {})})
    train_backdoor(model, _dataset(args.data, cfg), spec, sched, tc)
    out = _out(args, "backdoored_model")
    save_checkpoint(model, out, sched, seed=seed, role="backdoored")
    spec.to_json(out / "spec")
    print(out)
    return EXIT_OK


def cmd_profile(args) -> int:
    from .checkpoint import load_checkpoint
    from .diffusion import TrainConfig
    from .harness import build_spec, emit_report
    from .shift import graybox_profile, lambda_whitebox, profiled_timesteps

    cfg = _load_cfg(args)
    out = _out(args, "profile")
    out.mkdir(parents=True, exist_ok=True)
    if args.model:
        model, sched, _ = load_checkpoint(args.model)
        surrogate = build_spec({"trigger": args.surrogate, "target": "ring"}, model.image_shape[-1])
        tc = TrainConfig(**{**cfg.backdoor_train, "seed": _seed(args),
                            **({"steps": args.steps} if args.steps else {})})
        ts = profiled_timesteps(sched, args.max_chain, args.full_range)
        prof = graybox_profile(model, surrogate, _dataset(args.data, cfg), sched, tc, ts, seed=_seed(args))
    else:
        prof = lambda_whitebox(args.method, cfg.make_schedule(), gamma=args.gamma)
    prof.to_json(out / "profile.json")
    if args.plot:
        emit_report(out)
    print(out / "profile.json")
    return EXIT_OK


def cmd_invert(args) -> int:
    from .checkpoint import load_checkpoint
    from .inversion import InversionConfig, InversionDiverged, invert_trigger
    from .shift import ShiftProfile, lambda_whitebox

    cfg = _load_cfg(args)
    model, sched, _ = load_checkpoint(args.model)
    prof = ShiftProfile.from_json(args.profile) if args.profile else lambda_whitebox("BadDiffusion", sched)
    inv = InversionConfig(**{**cfg.inversion, **({"mode": args.mode} if args.mode else {})})
    code = EXIT_OK
    try:
        res = invert_trigger(model, prof, inv, sched, _seed(args))
    except InversionDiverged as err:
        res, code = err.partial, EXIT_PARTIAL
    print(res.save(_out(args, "inversion")))
    return code


def cmd_detect(args) -> int:
    from .checkpoint import load_checkpoint
    from .detection import DetectionConfig, detect
    from .inversion import InversionResult

    cfg = _load_cfg(args)
    model, sched, _ = load_checkpoint(args.model)
    inverted = InversionResult.load(args.inversion).trigger
    det = DetectionConfig(**{**cfg.detection, "seed": _seed(args),
                             **({"kl_threshold": args.kl_threshold} if args.kl_threshold is not None else {})})
    verdict = detect(model, inverted, det, sched, args.model_id or Path(args.model).name)
    line = verdict.to_json()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "a") as fh:
            fh.write(line + "\n")
    print(line)
    return EXIT_OK


def cmd_amplify(args) -> int:
    from .amplify import amplify
    from .checkpoint import load_checkpoint, save_checkpoint
    from .diffusion import TrainConfig
    from .harness import write_csv
    from .inversion import InversionConfig
    from .metrics import calibrate_tau
    from .shift import lambda_whitebox

    cfg = _load_cfg(args)
    clean, sched, _ = load_checkpoint(args.model)
    spec = _spec_from_args(args, sched, clean.image_shape[-1])
    data = _dataset(args.data, cfg)
    steps = args.steps or cfg.backdoor_train["steps"]
    tc = TrainConfig(**{**cfg.backdoor_train, "steps": steps, "seed": _seed(args)})
    tau = calibrate_tau(spec.target, data[:256], seed=0)
    res = amplify(clean, spec, sched, args.n_mds, lambda_whitebox(spec.method, sched, gamma=spec.gamma),
                  args.refine_dc, dataset=data, train_cfg=tc, tau=tau, seed=_seed(args),
                  cfg=InversionConfig(**cfg.inversion))
    out = _out(args, "amplify")
    save_checkpoint(res.model, out / "model", sched, seed=_seed(args), role="backdoored")
    np.save(out / "reinforced.npy", res.reinforced.pattern.numpy())
    write_csv(out / "amplify.csv", [{"epochs": steps, "asr_original": res.asr_before,
                                     "asr_reinforced": res.asr_after}],
              ["epochs", "asr_original", "asr_reinforced"])
    print(json.dumps({"asr_original": res.asr_before, "asr_reinforced": res.asr_after, **res.timings}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness import run_ablation, run_amplify_sweep, run_pipeline, run_poison_sweep

    cfg = _load_cfg(args)
    if args.kind == "amplify":
        print(run_amplify_sweep(cfg))
        return EXIT_OK
    if args.kind == "poison":
        print(run_poison_sweep(cfg))
        return EXIT_OK
    if args.kind == "ablation":
        print(run_ablation(cfg))
        return EXIT_OK
    summary = run_pipeline(cfg)
    summary.pop("records")
    print(json.dumps(summary, sort_keys=True))
    if summary["n_errors"]:
        return EXIT_PARTIAL if summary["n_records"] else EXIT_FATAL
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness import emit_report

    run_dir = args.run_dir or args.out
    if not run_dir:
        print("report needs a run directory", file=sys.stderr)
        return EXIT_FATAL
    code, paths = emit_report(run_dir)
    if code:
        print("no results", file=sys.stderr)
    for p in paths:
        print(p)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddpm-forensics", description="Backdoor forensics for DDPM denoisers.")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a procedural shapes dataset")
    s.add_argument("--n", type=int, default=2048)
    s.add_argument("--size", type=int, default=16)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train-clean", help="train a benign denoiser")
    s.add_argument("--data", help="dataset directory (default: synthesize from config)")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_clean)

    def spec_args(s):
        s.add_argument("--spec", help="BackdoorSpec JSON (overrides the flags below)")
        s.add_argument("--method", default="BadDiffusion")
        s.add_argument("--trigger", default="box")
        s.add_argument("--target", default="diamond")
        s.add_argument("--poison-rate", type=float, default=0.3)
        s.add_argument("--gamma", type=float)

    s = sub.add_parser("backdoor", help="poison-finetune a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--data")
    s.add_argument("--steps", type=int)
    spec_args(s)
    s.set_defaults(func=cmd_backdoor)

    s = sub.add_parser("profile", help="trigger-shift profile (white-box, or gray-box with --model)")
    s.add_argument("--model", help="suspicious checkpoint for gray-box estimation")
    s.add_argument("--method", default="BadDiffusion")
    s.add_argument("--gamma", type=float)
    s.add_argument("--surrogate", default="stripe")
    s.add_argument("--data")
    s.add_argument("--steps", type=int)
    s.add_argument("--max-chain", type=int, default=50)
    s.add_argument("--full-range", action="store_true")
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("invert", help="invert a trigger from a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--profile")
    s.add_argument("--mode", choices=["two-stage", "mds-only", "dc-only", "single-step-baseline"])
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("detect", help="classify a checkpoint given an inversion result")
    s.add_argument("--model", required=True)
    s.add_argument("--inversion", required=True)
    s.add_argument("--kl-threshold", type=float)
    s.add_argument("--model-id")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("amplify", help="backdoor a clean checkpoint and reinforce the trigger")
    s.add_argument("--model", required=True, help="clean checkpoint")
    s.add_argument("--data")
    s.add_argument("--steps", type=int)
    s.add_argument("--n-mds", type=int, default=30)
    s.add_argument("--refine-dc", type=int)
    spec_args(s)
    s.set_defaults(func=cmd_amplify)

    s = sub.add_parser("sweep", help="run the zoo pipeline or a sweep from --config")
    s.add_argument("--kind", choices=["pipeline", "amplify", "poison", "ablation"], default="pipeline")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="render tables and plots for a run directory")
    s.add_argument("run_dir", nargs="?")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_FATAL
    except Exception as err:  # noqa: BLE001 - reported as a fatal exit
        logging.getLogger("ddpm_forensics").error("%s: %s", type(err).__name__, err)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
