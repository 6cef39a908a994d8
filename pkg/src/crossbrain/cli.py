"""Command-line front end.

Subcommands: gen-data | pretrain | adapt | synthesize | eval.
Structural settings come from a JSON config file ({"cohort": ..., "model":
..., "train": ..., "subjects": [...]}); flags carry only run identity
(seed, paths, precision, subset size). All artifacts land under --out.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical abort.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import container, precision
from .data import CohortSpec, generate_cohort, load_cohort, save_cohort
from .errors import (ConfigError, CrossbrainError, FormatError, NumericalError,
                     ParameterError, UnknownSubjectError, UsageError)
from .model import ModelConfig, init_model
from .syntheval import evaluate, synthesize_fmri
from .training import TrainConfig, adapt_new_subject, load_checkpoint, pretrain

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="crossbrain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="overrides config seeds")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--precision", choices=("f32", "f64"), default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort container")
    common(p)

    p = sub.add_parser("pretrain", help="cross-subject pretraining")
    common(p)
    p.add_argument("--data", required=True, help="cohort container (MBDS)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("adapt", help="reset-tuning adaptation to a new subject")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint (MBCK)")
    p.add_argument("--new-subject", required=True)
    p.add_argument("--subset", type=int, default=None, help="limit new-subject train rows")
    p.add_argument("--baseline-scratch", action="store_true",
                   help="also train the same subject from scratch and report both")

    p = sub.add_parser("synthesize", help="cross-subject signal synthesis")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--from", dest="from_subject", required=True)
    p.add_argument("--to", dest="to_subject", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cohort")
    common(p, config_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    return parser


def _read_config(path) -> dict:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return raw


def _configs(raw: dict, seed: int | None) -> tuple[CohortSpec, ModelConfig, TrainConfig]:
    spec = CohortSpec.from_dict(raw.get("cohort", {}))
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    if seed is not None:
        spec = replace(spec, seed=seed)
        train_cfg = replace(train_cfg, seed=seed)
    return spec, model_cfg, train_cfg


def _cmd_gen_data(args) -> int:
    raw = _read_config(args.config)
    spec, _, _ = _configs(raw, args.seed)
    cohort = generate_cohort(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "cohort.mbds"
    save_cohort(cohort, path)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    raw = _read_config(args.config)
    _, model_cfg, train_cfg = _configs(raw, args.seed)
    cohort = load_cohort(args.data)
    subjects = raw.get("subjects") or cohort.subjects
    for sid in subjects:
        if sid not in cohort.recordings:
            raise ConfigError(f"config subject {sid!r} not present in {args.data}")
    state = init_model(model_cfg, subjects, train_cfg.seed)
    result = pretrain(state, cohort, train_cfg, subjects=subjects, out_dir=args.out,
                      resume=args.resume)
    print(f"wrote {result.final_path} and {result.csv_path}")
    return EXIT_OK


def _cmd_adapt(args) -> int:
    raw = _read_config(args.config)
    _, model_cfg, train_cfg = _configs(raw, args.seed)
    cohort = load_cohort(args.data)
    if args.new_subject not in cohort.recordings:
        raise ConfigError(f"new subject {args.new_subject!r} not present in {args.data}")
    out = Path(args.out)
    result = adapt_new_subject(args.checkpoint, cohort, args.new_subject, train_cfg,
                               subset=args.subset, out_dir=out)
    adapted_eval = evaluate(result.state, cohort, subjects=[args.new_subject],
                            tau=train_cfg.tau, aggregation=train_cfg.aggregation,
                            trials=train_cfg.eval_trials, seed=train_cfg.seed)
    summary = {
        "new_subject": args.new_subject,
        "rows_used": result.rows_used,
        "adapted": adapted_eval.mean,
        "checkpoint": str(result.final_path),
    }
    if args.baseline_scratch:
        scratch_cfg = replace(train_cfg, enable_rec_cyc=False, pseudo_augment=False)
        scratch_state = init_model(model_cfg, [args.new_subject], scratch_cfg.seed)
        scratch = pretrain(scratch_state, cohort, scratch_cfg, subjects=[args.new_subject],
                           out_dir=out / "scratch", subset=args.subset, log_name="scratch")
        scratch_eval = evaluate(scratch.state, cohort, subjects=[args.new_subject],
                                tau=train_cfg.tau, aggregation=train_cfg.aggregation,
                                trials=train_cfg.eval_trials, seed=train_cfg.seed)
        summary["scratch"] = scratch_eval.mean
    report_path = out / "adapt_report.json"
    report_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {result.final_path} and {report_path}")
    return EXIT_OK


def _cmd_synthesize(args) -> int:
    cohort = load_cohort(args.data)
    state, _, meta = load_checkpoint(args.checkpoint)
    voxels = cohort.pooled(args.from_subject, state.config.pooled_size, args.split,
                           meta["aggregation"])
    synthesized = synthesize_fmri(state, args.from_subject, args.to_subject, voxels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"synthesized_{args.from_subject}_to_{args.to_subject}.mbds"
    ids = cohort.test_ids if args.split == "test" else cohort.recording(args.from_subject).train_ids
    container.save_container(path, {
        f"voxels/{args.to_subject}/synthesized": synthesized,
        "ids/source": ids.astype(np.float64),
    })
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cohort = load_cohort(args.data)
    state, _, meta = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else meta["seed"]
    report = evaluate(state, cohort, split=args.split, tau=meta["tau"],
                      aggregation=meta["aggregation"], trials=meta["eval_trials"],
                      seed=seed, fingerprint=meta["fingerprint"])
    json_path, csv_path = report.save(args.out, stem="eval")
    print(f"wrote {json_path} and {csv_path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "adapt": _cmd_adapt,
    "synthesize": _cmd_synthesize,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.precision is not None:
        precision.set_precision(args.precision)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, ParameterError, UnknownSubjectError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CrossbrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
