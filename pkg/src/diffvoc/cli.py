"""Command-line entry points.

Exit codes: 0 success, 1 usage/configuration error, 2 schedule validation
failure, 3 runtime or numerical failure. ``DIFFVOC_OUTPUT_ROOT`` sets the
default output root when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .audio_data import load_wav, make_split, mel_features, read_corpus, save_wav, synth_corpus, write_corpus
from .config import FINETUNE, PRETRAIN, RunConfig, load_run_config
from .diffusion import generate
from .errors import CheckpointError, ConfigurationError, ContractError, DiffvocError, NumericalError
from .evaluation import emit_report, evaluate_model, grid_search, prepare_eval_clips, sensitivity_sweep
from .noise_model import DTYPE, file_digest, read_checkpoint
from .schedules import (
    InferenceSchedule,
    ScheduleRange,
    enumerate_grid,
    paper_range,
    schedule_from_dict,
    validate_inference_schedule,
)
from .trainer import SegmentDataset, run_training

log = logging.getLogger("diffvoc")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ValidationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("DIFFVOC_OUTPUT_ROOT", "runs")) / command


def _digest_file(path) -> str | None:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest() if path else None


def write_run_manifest(path: Path, command: str, args, config_path=None, seed=None) -> None:
    doc = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config_digest": _digest_file(config_path) if config_path else None,
        "seed": seed,
        "version": __version__,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def parse_schedule_arg(text: str) -> InferenceSchedule:
    try:
        return InferenceSchedule(tuple(float(v) for v in text.split(",") if v.strip()))
    except (ValueError, ContractError) as exc:
        raise UsageError(f"bad schedule {text!r}: {exc}") from exc


def _load_schedule(args) -> InferenceSchedule:
    if args.schedule_file:
        s = schedule_from_dict(json.loads(Path(args.schedule_file).read_text()))
        if not isinstance(s, InferenceSchedule):
            raise UsageError("schedule file must contain {\"betas_hat\": [...]}")
        return s
    if args.schedule:
        return parse_schedule_arg(args.schedule)
    raise UsageError("give --schedule or --schedule-file")


def _checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    ck = read_checkpoint(path)
    cfg = RunConfig.from_dict(ck.meta["run_config"]) if "run_config" in ck.meta else RunConfig.desk()
    model_id = f"{Path(path).stem}@{file_digest(path)[:12]}"
    return ck.predictor, cfg, model_id


def cmd_make_dataset(args) -> int:
    out = _out_dir(args, "dataset")
    if (out / "manifest.json").exists() and not args.force:
        raise UsageError(f"{out} already holds a corpus; pass --force to overwrite")
    clips = synth_corpus(args.n_clips, args.clip_seconds, args.seed, args.sample_rate)
    if not clips:
        log.warning("n_clips=0: writing an empty manifest")
    n_test = min(args.n_test, len(clips))
    n_search = min(args.n_search, len(clips) - n_test)
    split = make_split([c.id for c in clips], n_test, n_search)
    path = write_corpus(clips, split, out)
    write_run_manifest(out / "run_manifest.json", "make-dataset", args, seed=args.seed)
    print(f"wrote {len(clips)} clips, manifest {path} sha256={file_digest(path)}")
    return EXIT_OK


def _train(args, phase: str) -> int:
    if not Path(args.config).exists():
        raise UsageError(f"config not found: {args.config}")
    cfg = load_run_config(args.config)
    changes = {"phase": phase}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.max_steps is not None:
        changes["max_steps"] = args.max_steps
    cfg = cfg.with_training(**changes)
    if phase == FINETUNE and not (args.init or args.resume):
        raise UsageError("finetune needs a pretrained checkpoint (--init) or --resume")
    for p in (args.init, args.resume):
        if p and not Path(p).exists():
            raise UsageError(f"checkpoint not found: {p}")
    clips, split = read_corpus(args.data)
    train = [c for c in clips if c.id in set(split.train_ids)]
    out = _out_dir(args, phase.lower())
    result = run_training(cfg, SegmentDataset(train, cfg.features), out, init_checkpoint=args.init, resume=args.resume, keep_records=False)
    write_run_manifest(out / f"run_manifest_{phase.lower()}.json", phase.lower(), args, args.config, cfg.training.seed)
    final = result.final_checkpoint
    print(f"final checkpoint {final} sha256={file_digest(final)}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train(args, PRETRAIN)


def cmd_finetune(args) -> int:
    return _train(args, FINETUNE)


def cmd_sample(args) -> int:
    predictor, cfg, _ = _checkpoint(args.checkpoint)
    schedule = _load_schedule(args)
    report = validate_inference_schedule(schedule, cfg.schedule)
    if not report.passed:
        for v in report.violations:
            print(v.describe(), file=sys.stderr)
        if not args.allow_invalid:
            raise ValidationFailed("schedule rejected by the validator (use --allow-invalid to override)")
    feats = cfg.features
    if args.input_wav:
        clip = load_wav(args.input_wav)
        frames = mel_features(clip, feats).frames[: clip.samples.size // feats.hop_length]
    elif args.mel:
        frames = np.load(args.mel)
    else:
        raise UsageError("give --input-wav or --mel")
    if frames.ndim != 2 or frames.shape[1] != feats.n_mels or frames.shape[0] == 0:
        raise UsageError(f"conditioner must be (frames, {feats.n_mels})")
    rng = np.random.default_rng(args.seed)
    audio = generate(predictor, torch.from_numpy(frames).to(DTYPE), schedule, rng).numpy()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_wav(out, audio, feats.sample_rate)
    write_run_manifest(out.with_suffix(".manifest.json"), "sample", args, seed=args.seed)
    print(f"wrote {out} ({audio.size / feats.sample_rate:.3f} s)")
    return EXIT_OK


def _eval_clips(args, cfg):
    clips, split = read_corpus(args.data)
    ids = set(getattr(split, f"{args.split}_ids"))
    chosen = [c for c in clips if c.id in ids][: args.max_clips]
    if not chosen:
        raise UsageError(f"no clips in split {args.split!r}")
    return prepare_eval_clips(chosen, cfg.features)


def _grid(args):
    if args.grid_file:
        doc = json.loads(Path(args.grid_file).read_text())
        return [InferenceSchedule(tuple(d["betas_hat"])) for d in doc], f"explicit grid from {Path(args.grid_file).name}"
    mantissas = [float(m) if "." in m else int(m) for m in args.mantissas.split(",")]
    if args.range_file:
        rng_ = ScheduleRange.from_dict(json.loads(Path(args.range_file).read_text()))
        desc = f"range {rng_.per_step_ranges}"
    else:
        rng_ = paper_range(args.n_steps)
        desc = f"preset range N={args.n_steps}"
    return enumerate_grid(rng_, mantissas), f"{desc} mantissas {mantissas}"


def _formats(fmt: str):
    return ("json", "csv") if fmt == "both" else (fmt,)


def _sweep_cmd(args, fn, command) -> int:
    predictor, cfg, model_id = _checkpoint(args.checkpoint)
    clips = _eval_clips(args, cfg)
    grid, desc = _grid(args)
    report = fn(predictor, clips, grid, cfg.features, model_id, desc, train_schedule=cfg.schedule)
    out = _out_dir(args, command)
    files = emit_report(report, out, command.replace("-", "_"), _formats(args.format), plot=args.plot)
    write_run_manifest(out / f"run_manifest_{command}.json", command, args, seed=None)
    print(f"mean={report.mean} std={report.std} best={list(report.best) if report.best else None}")
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def cmd_grid_search(args) -> int:
    return _sweep_cmd(args, grid_search, "grid-search")


def cmd_sweep(args) -> int:
    return _sweep_cmd(args, sensitivity_sweep, "sweep")


def cmd_evaluate(args) -> int:
    predictor, cfg, model_id = _checkpoint(args.checkpoint)
    clips = _eval_clips(args, cfg)
    schedule = _load_schedule(args)
    report = evaluate_model(predictor, clips, schedule, cfg.features, cfg.multires, model_id)
    out = _out_dir(args, "evaluate")
    files = emit_report(report, out, "metrics", _formats(args.format))
    write_run_manifest(out / "run_manifest_evaluate.json", "evaluate", args)
    print(json.dumps(report.aggregate, sort_keys=True))
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = RunConfig.paper() if args.preset == "paper" else RunConfig.desk()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(cfg.to_json())
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffvoc", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("config", help="write a preset run configuration")
    s.add_argument("--preset", choices=("desk", "paper"), default="desk")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("make-dataset", help="synthesize a desk-scale corpus")
    s.add_argument("--out")
    s.add_argument("--n-clips", type=int, default=200)
    s.add_argument("--clip-seconds", type=float, default=1.0)
    s.add_argument("--sample-rate", type=int, default=8000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-test", type=int, default=20)
    s.add_argument("--n-search", type=int, default=10)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_make_dataset)

    for name, fn in (("train", cmd_train), ("finetune", cmd_finetune)):
        s = sub.add_parser(name, help=f"{name} a noise predictor")
        s.add_argument("--config", required=True)
        s.add_argument("--data", required=True, help="corpus directory or manifest")
        s.add_argument("--out")
        s.add_argument("--init", help="checkpoint to start from")
        s.add_argument("--resume", help="checkpoint of this run to resume from")
        s.add_argument("--seed", type=int)
        s.add_argument("--max-steps", type=int)
        s.set_defaults(func=fn)

    def schedule_args(s):
        g = s.add_mutually_exclusive_group()
        g.add_argument("--schedule", help="comma-separated beta_hat values")
        g.add_argument("--schedule-file", help='JSON {"betas_hat": [...]}')

    s = sub.add_parser("sample", help="generate audio from a conditioner")
    s.add_argument("--checkpoint", required=True)
    schedule_args(s)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--input-wav")
    g.add_argument("--mel", help=".npy array (frames, n_mels)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--allow-invalid", action="store_true")
    s.set_defaults(func=cmd_sample)

    for name, fn, split in (("grid-search", cmd_grid_search, "search"), ("sweep", cmd_sweep, "test")):
        s = sub.add_parser(name, help=f"{name} over inference schedules")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--split", choices=("train", "search", "test"), default=split)
        s.add_argument("--max-clips", type=int, default=10)
        s.add_argument("--n-steps", type=int, default=3, choices=(2, 3, 6))
        s.add_argument("--range-file")
        s.add_argument("--grid-file")
        s.add_argument("--mantissas", default="1,2,3,4,5,6,7,8,9")
        s.add_argument("--format", choices=("json", "csv", "both"), default="both")
        s.add_argument("--plot", action="store_true")
        s.add_argument("--out")
        s.set_defaults(func=fn)

    s = sub.add_parser("evaluate", help="objective metrics for one schedule")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "search", "test"), default="test")
    s.add_argument("--max-clips", type=int, default=100)
    schedule_args(s)
    s.add_argument("--format", choices=("json", "csv", "both"), default="both")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, CheckpointError, DiffvocError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
