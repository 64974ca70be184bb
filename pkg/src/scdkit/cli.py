"""Command-line entry point.

Subcommands: synth, train, train-baseline, eval, tune, trace.  Exit codes:
0 on success, 2 on configuration or input validation errors, 3 on runtime
failures.  Every command writes only under its --out directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from . import config as cfg_mod
from .data import generate_session, load_features, load_labels, store_features, store_labels
from .exceptions import ConfigError, ParseError, ScdError
from .inference import evaluate_sessions, tune_threshold, write_results
from .integrate_fire import trace_integrate_and_fire
from .model import FrameBaseline, SpeakerChangeModel
from .trainer import load_checkpoint, train, train_frame_baseline

ABLATIONS = ("length_norm", "scaling", "focal")

TRACE_COLUMNS = ("index", "score", "acc_before", "fired",
                 "part_used", "part_carried", "acc_after")


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
        cfg["data"]["seed"] = args.seed
    for name in getattr(args, "ablate", None) or []:
        if name == "length_norm":
            cfg["head"]["use_length_norm"] = False
        elif name == "scaling":
            cfg["train"]["use_scaling"] = False
        elif name == "focal":
            cfg["train"]["use_focal"] = False
        else:
            raise ConfigError(f"unknown ablation {name!r}; pick from {ABLATIONS}")
    if getattr(args, "theta", None) is not None:
        if not 0.0 <= args.theta <= 1.0:
            raise ConfigError("--theta must lie in [0, 1]")
        cfg["infer"]["theta"] = args.theta
    return cfg_mod.validate_config(cfg)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_sessions(data_dir) -> list[tuple[str, object, object]]:
    """Read every feature/label pair under a directory (non-recursive)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ConfigError(f"data directory not found: {data_dir}")
    sessions = []
    for feats_path in sorted(data_dir.glob("*.feats")):
        labels_path = feats_path.with_suffix(".labels")
        if not labels_path.exists():
            raise ConfigError(f"missing label file for {feats_path.name}")
        sessions.append(
            (feats_path.stem, load_features(feats_path), load_labels(labels_path))
        )
    if not sessions:
        raise ConfigError(f"no *.feats files under {data_dir}")
    return sessions


def _synthesize_split(cfg: dict, split: str) -> list[tuple[str, object, object]]:
    count = cfg_mod.split_session_count(cfg, split)
    sessions = []
    for i in range(count):
        features, labels = generate_session(cfg_mod.synth_config(cfg, split, i))
        sessions.append((f"{split}_{i:03d}", features, labels))
    return sessions


def _training_data(cfg: dict, args):
    """Sessions for the trainer: from --data subdirectories or synthesized."""
    if getattr(args, "data", None):
        root = Path(args.data)
        train_dir = root / "train"
        train_sessions = load_sessions(train_dir if train_dir.is_dir() else root)
        dev_dir = root / "dev"
        dev_sessions = load_sessions(dev_dir) if dev_dir.is_dir() else []
    else:
        train_sessions = _synthesize_split(cfg, "train")
        dev_sessions = _synthesize_split(cfg, "dev")
    return train_sessions, dev_sessions


def _make_dev_eval(dev_sessions, infer_cfg):
    if not dev_sessions:
        return None

    def dev_eval(model):
        _, report = tune_threshold(model, dev_sessions, infer_cfg)
        return report.purity, report.coverage, report.hn

    return dev_eval


def cmd_synth(args) -> int:
    cfg = _apply_overrides(cfg_mod.load_config(args.config), args)
    out = _out_dir(args)
    summary = {}
    for split in ("train", "dev", "test"):
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        total_s = 0.0
        speakers = set()
        for session_id, features, labels in _synthesize_split(cfg, split):
            store_features(split_dir / f"{session_id}.feats", features)
            store_labels(split_dir / f"{session_id}.labels", labels)
            total_s += features.duration_s
            speakers.update(labels.speakers())
        summary[split] = {
            "sessions": cfg_mod.split_session_count(cfg, split),
            "total_seconds": total_s,
            "speakers": sorted(speakers),
        }
    print(json.dumps(summary, indent=2))
    return 0


def _run_training(args, baseline: bool) -> int:
    cfg = _apply_overrides(cfg_mod.load_config(args.config), args)
    out = _out_dir(args)
    train_sessions, dev_sessions = _training_data(cfg, args)
    data = [(features, labels) for _, features, labels in train_sessions]

    resume_from = None
    if getattr(args, "resume", None):
        resume_from = load_checkpoint(args.resume)

    train_cfg = cfg_mod.train_config(cfg)
    infer_cfg = cfg_mod.inference_config(cfg)
    dev_eval = _make_dev_eval(dev_sessions, infer_cfg)

    torch.manual_seed(train_cfg.seed)
    if baseline:
        model = FrameBaseline(cfg_mod.encoder_config(cfg))
        ckpt = train_frame_baseline(
            data, model, train_cfg, config_snapshot=cfg, out_dir=out,
            resume_from=resume_from, dev_eval=dev_eval,
        )
    else:
        model = SpeakerChangeModel(cfg_mod.pipeline_config(cfg))
        ckpt = train(
            data, model, train_cfg, cfg_mod.loss_config(cfg),
            config_snapshot=cfg, out_dir=out,
            resume_from=resume_from, dev_eval=dev_eval,
        )
    last = ckpt.log_rows[-1] if ckpt.log_rows else {}
    print(json.dumps({
        "checkpoint": str(out / "model.ckpt"),
        "log": str(out / "train_log.csv"),
        "final_step": ckpt.step,
        "final_loss": last.get("loss", ""),
    }, indent=2))
    return 0


def cmd_train(args) -> int:
    return _run_training(args, baseline=False)


def cmd_train_baseline(args) -> int:
    return _run_training(args, baseline=True)


def _load_model(checkpoint_path):
    ckpt = load_checkpoint(checkpoint_path)
    model = cfg_mod.build_model(ckpt.config, ckpt.kind)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, ckpt


def cmd_eval(args) -> int:
    cfg = _apply_overrides(cfg_mod.load_config(args.config), args)
    out = _out_dir(args)
    model, _ = _load_model(args.checkpoint)
    sessions = load_sessions(args.data)
    infer_cfg = cfg_mod.inference_config(cfg)
    aggregate, per_session = evaluate_sessions(model, sessions, infer_cfg)
    payload = write_results(out / "results.json", aggregate, per_session)
    print(json.dumps(payload["aggregate"], indent=2))
    return 0


def cmd_tune(args) -> int:
    cfg = _apply_overrides(cfg_mod.load_config(args.config), args)
    out = _out_dir(args)
    model, _ = _load_model(args.checkpoint)
    sessions = load_sessions(args.data)
    infer_cfg = cfg_mod.inference_config(cfg)
    theta, report = tune_threshold(model, sessions, infer_cfg)
    payload = {"theta": theta, **report.as_dict()}
    (out / "tuned.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


def _read_score_file(path) -> list[float]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"score file not found: {path}")
    scores = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        try:
            scores.append(float(text))
        except ValueError as err:
            raise ParseError(path, line_no, f"not a number: {text!r}") from err
    if not scores:
        raise ConfigError(f"no scores in {path}")
    return scores


def cmd_trace(args) -> int:
    cfg = _apply_overrides(cfg_mod.load_config(args.config), args)
    out = _out_dir(args)
    fire_cfg = cfg_mod.pipeline_config(cfg).fire
    if args.scores:
        scores = _read_score_file(args.scores)
    else:
        if not (args.checkpoint and args.features):
            raise ConfigError("trace needs either --scores or --checkpoint with --features")
        model, ckpt = _load_model(args.checkpoint)
        if ckpt.kind != "pipeline":
            raise ConfigError("trace requires a pipeline checkpoint")
        features = load_features(args.features)
        x = torch.as_tensor(features.frames, dtype=torch.float64).unsqueeze(0)
        with torch.no_grad():
            _, d = model.encode_and_score(x)
        scores = [float(v) for v in d[0]]
        fire_cfg = model.cfg.fire
    steps = trace_integrate_and_fire(scores, fire_cfg)
    trace_path = out / "trace.csv"
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for step in steps:
            writer.writerow([
                step.index, f"{step.score:.12g}", f"{step.acc_before:.12g}",
                int(step.fired), f"{step.part_used:.12g}",
                f"{step.part_carried:.12g}", f"{step.acc_after:.12g}",
            ])
    print(json.dumps({
        "trace": str(trace_path),
        "rows": len(steps),
        "fires": sum(1 for s in steps if s.fired),
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scdkit",
        description="Sequence-level speaker change detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, data=False):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the seeds")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint")
        if data:
            p.add_argument("--data", required=True, help="directory of session files")

    p = sub.add_parser("synth", help="generate synthetic sessions")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the change-detection pipeline")
    common(p)
    p.add_argument("--data", default=None, help="session directory (default: synthesize)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--ablate", action="append", choices=ABLATIONS, default=None,
                   help="disable a pipeline component (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-baseline", help="train the per-frame baseline")
    common(p)
    p.add_argument("--data", default=None, help="session directory (default: synthesize)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled sessions")
    common(p, checkpoint=True, data=True)
    p.add_argument("--theta", type=float, default=None, help="decision threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", help="tune the decision threshold on a dev set")
    common(p, checkpoint=True, data=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("trace", help="dump per-frame integrate-and-fire internals")
    common(p)
    p.add_argument("--scores", default=None, help="text file of difference scores")
    p.add_argument("--checkpoint", default=None, help="pipeline checkpoint")
    p.add_argument("--features", default=None, help="feature file to trace")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ScdError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
