"""Optimization loop, learning-rate schedule, checkpoints, gradient checks.

One loop drives both the sequence-level pipeline and the frame-labeling
baseline: per step it samples feature windows uniformly (session first,
then start frame), optionally adds noise, computes the model's loss, and
applies an adaptive-moment update at the scheduled rate.  Everything runs
in double precision on the CPU, so a fixed seed gives a bit-identical
trajectory.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import FeatureSequence, SegmentLabels, add_noise, sample_training_window
from .exceptions import (
    BoundaryAdjacentError,
    ConfigError,
    NumericalError,
    TrainingDivergedError,
)
from .model import FrameBaseline, LossConfig, SpeakerChangeModel, collar_targets

LOG_COLUMNS = ("step", "lr", "loss", "mlfl", "quantity",
               "dev_purity", "dev_coverage", "dev_hn")

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Windowing, schedule, and loop settings shared by both trainers."""

    window_s: float = 4.0
    batch_size: int = 16
    peak_lr: float = 1e-4
    warmup_frac: float = 0.05
    hold_frac: float = 0.50
    total_steps: int = 500
    seed: int = 0
    augment_snr_db: tuple[float, float] | None = (10.0, 40.0)
    collar_s: float = 0.1
    log_every: int = 10
    dev_eval_every: int = 0

    def validate(self):
        if self.window_s <= 0:
            raise ConfigError("window_s must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.warmup_frac < 0 or self.hold_frac < 0:
            raise ConfigError("schedule fractions must be nonnegative")
        if self.warmup_frac + self.hold_frac > 1.0:
            raise ConfigError("warmup_frac + hold_frac must not exceed 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.collar_s < 0:
            raise ConfigError("collar_s must be nonnegative")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if self.dev_eval_every < 0:
            raise ConfigError("dev_eval_every must be nonnegative")


def lr_schedule(
    step: int,
    total: int,
    peak: float,
    warmup_frac: float = 0.05,
    hold_frac: float = 0.50,
) -> float:
    """Piecewise-linear rate: ramp to peak, hold, decay to zero.

    Breakpoints are rounded to whole steps so the endpoints are exact:
    0 at step 0, peak across [warmup end, hold end], 0 at step total.
    """
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm_end = round(warmup_frac * total)
    hold_end = round((warmup_frac + hold_frac) * total)
    if step <= warm_end:
        if warm_end == 0:
            return 0.0 if step == 0 else peak
        return peak * (step / warm_end)
    if step <= hold_end or hold_end >= total:
        return peak
    return peak * ((total - step) / (total - hold_end))


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume its optimization."""

    kind: str
    config: dict
    step: int
    model_state: dict
    optimizer_state: dict | None = None
    torch_rng: torch.Tensor | None = None
    numpy_rng: dict | None = None
    version: int = CHECKPOINT_VERSION
    # transient training log, populated by the loop but never persisted
    log_rows: list = field(default_factory=list)


def save_checkpoint(path, ckpt: Checkpoint):
    payload = {
        "version": ckpt.version,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "step": ckpt.step,
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "torch_rng": ckpt.torch_rng,
        "numpy_rng": ckpt.numpy_rng,
    }
    torch.save(payload, str(path))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(str(path), weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r}")
    return Checkpoint(
        kind=payload["kind"],
        config=payload["config"],
        step=payload["step"],
        model_state=payload["model_state"],
        optimizer_state=payload.get("optimizer_state"),
        torch_rng=payload.get("torch_rng"),
        numpy_rng=payload.get("numpy_rng"),
    )


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _sample_window(sessions, cfg: TrainConfig, rng, catalog, max_tries: int = 100):
    """Uniform session, then uniform start; resample unusable windows."""
    last_err = None
    for _ in range(max_tries):
        features, labels = sessions[int(rng.integers(len(sessions)))]
        try:
            example = sample_training_window(
                features, labels, cfg.window_s, rng, catalog=catalog
            )
        except ValueError as err:
            last_err = err
            continue
        if cfg.augment_snr_db is not None:
            noisy = add_noise(example.features, cfg.augment_snr_db, rng)
            example.features = noisy
        return example
    raise ValueError(f"no usable window after {max_tries} draws: {last_err}")


def session_catalog(sessions) -> tuple[str, ...]:
    """Sorted union of the speaker names over all sessions."""
    names: set[str] = set()
    for _, labels in sessions:
        names.update(labels.speakers())
    return tuple(sorted(names))


def _run_loop(model, cfg, make_batch, compute_loss, *,
              kind, config_snapshot, out_dir, resume_from, dev_eval):
    cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.peak_lr,
                                 betas=(0.9, 0.999))
    start_step = 0
    if resume_from is not None:
        if resume_from.kind != kind:
            raise ConfigError(
                f"checkpoint holds a {resume_from.kind!r} model, expected {kind!r}"
            )
        model.load_state_dict(resume_from.model_state)
        if resume_from.optimizer_state is not None:
            optimizer.load_state_dict(resume_from.optimizer_state)
        if resume_from.torch_rng is not None:
            torch.set_rng_state(resume_from.torch_rng)
        if resume_from.numpy_rng is not None:
            rng.bit_generator.state = resume_from.numpy_rng
        start_step = resume_from.step

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            kind=kind,
            config=dict(config_snapshot or {}),
            step=step,
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            optimizer_state=optimizer.state_dict(),
            torch_rng=torch.get_rng_state(),
            numpy_rng=rng.bit_generator.state,
        )

    rows = []
    log_path = out_dir / "train_log.csv" if out_dir is not None else None
    for step in range(start_step + 1, cfg.total_steps + 1):
        lr = lr_schedule(step, cfg.total_steps, cfg.peak_lr,
                         cfg.warmup_frac, cfg.hold_frac)
        for group in optimizer.param_groups:
            group["lr"] = lr
        x, targets = make_batch(rng)
        try:
            loss, stats = compute_loss(x, targets)
        except NumericalError as err:
            if out_dir is not None:
                save_checkpoint(out_dir / "diverged.ckpt", snapshot(step))
            raise TrainingDivergedError(f"step {step}: {err}") from err
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            if out_dir is not None:
                save_checkpoint(out_dir / "diverged.ckpt", snapshot(step))
            raise TrainingDivergedError(f"step {step}: non-finite loss {loss_value}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if step % cfg.log_every == 0 or step == cfg.total_steps:
            row = {
                "step": step,
                "lr": f"{lr:.10g}",
                "loss": f"{loss_value:.10g}",
                "mlfl": f"{stats.get('mlfl', 0.0):.10g}",
                "quantity": f"{stats.get('quantity', 0.0):.10g}",
                "dev_purity": "",
                "dev_coverage": "",
                "dev_hn": "",
            }
            if (dev_eval is not None and cfg.dev_eval_every > 0
                    and (step % cfg.dev_eval_every == 0 or step == cfg.total_steps)):
                purity, coverage, hn = dev_eval(model)
                row["dev_purity"] = f"{purity:.4f}"
                row["dev_coverage"] = f"{coverage:.4f}"
                row["dev_hn"] = f"{hn:.4f}"
            rows.append(row)
            if log_path is not None:
                _write_log(log_path, rows)

    final = snapshot(cfg.total_steps)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", final)
    final.log_rows = rows
    return final


def train(
    sessions: list[tuple[FeatureSequence, SegmentLabels]],
    model: SpeakerChangeModel,
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    *,
    config_snapshot: dict | None = None,
    out_dir=None,
    resume_from: Checkpoint | None = None,
    dev_eval=None,
) -> Checkpoint:
    """Optimize the sequence-level pipeline over synthetic sessions."""
    if not sessions:
        raise ValueError("need at least one training session")
    loss_cfg = loss_cfg or LossConfig()
    catalog = session_catalog(sessions)
    if len(catalog) != model.cfg.head.num_speakers:
        raise ConfigError(
            f"{len(catalog)} speakers in the data vs decoder width "
            f"{model.cfg.head.num_speakers}"
        )

    def make_batch(rng):
        examples = [_sample_window(sessions, cfg, rng, catalog)
                    for _ in range(cfg.batch_size)]
        x = torch.stack([torch.as_tensor(ex.features.frames, dtype=torch.float64)
                         for ex in examples])
        targets = [torch.as_tensor(ex.identity_sequence.targets, dtype=torch.float64)
                   for ex in examples]
        return x, targets

    def compute_loss(x, targets):
        return model.window_losses(x, targets, loss_cfg)

    return _run_loop(model, cfg, make_batch, compute_loss,
                     kind="pipeline", config_snapshot=config_snapshot,
                     out_dir=out_dir, resume_from=resume_from, dev_eval=dev_eval)


def train_frame_baseline(
    sessions: list[tuple[FeatureSequence, SegmentLabels]],
    model: FrameBaseline,
    cfg: TrainConfig,
    *,
    config_snapshot: dict | None = None,
    out_dir=None,
    resume_from: Checkpoint | None = None,
    dev_eval=None,
) -> Checkpoint:
    """Optimize the per-frame binary change classifier on the same data."""
    if not sessions:
        raise ValueError("need at least one training session")
    catalog = session_catalog(sessions)
    factor = model.encoder.cfg.downsampling_factor

    def make_batch(rng):
        examples = [_sample_window(sessions, cfg, rng, catalog)
                    for _ in range(cfg.batch_size)]
        x = torch.stack([torch.as_tensor(ex.features.frames, dtype=torch.float64)
                         for ex in examples])
        num_encoded = -(-x.shape[1] // factor)
        shift = examples[0].features.frame_shift_s * factor
        targets = torch.stack([
            collar_targets(ex.change_times_s, num_encoded, shift, cfg.collar_s)
            for ex in examples
        ])
        return x, targets

    def compute_loss(x, targets):
        return model.window_losses(x, targets)

    return _run_loop(model, cfg, make_batch, compute_loss,
                     kind="baseline", config_snapshot=config_snapshot,
                     out_dir=out_dir, resume_from=resume_from, dev_eval=dev_eval)


def _flatten_grads(model) -> np.ndarray:
    parts = []
    for param in model.parameters():
        if param.grad is None:
            parts.append(np.zeros(param.numel()))
        else:
            parts.append(param.grad.detach().numpy().ravel().copy())
    return np.concatenate(parts)


def _assert_interior(model: SpeakerChangeModel, x, targets, loss_cfg, eps):
    """Reject examples whose loss sits near a non-differentiable boundary.

    The margins are heuristics (a parameter nudge of eps moves the scores
    by an unknown factor); the hard guarantee is the fire-pattern equality
    check run during the sweep itself.
    """
    margin = 10.0 * eps
    with torch.no_grad():
        _, d = model.encode_and_score(x)
    for i, identity in enumerate(targets):
        di = d[i]
        if ((di < margin) | (di > 1.0 - margin)).any():
            raise BoundaryAdjacentError(
                f"window {i}: a difference score sits within {margin:g} of the "
                f"clamp bounds"
            )
        total = float(di.sum())
        num_segments = int(identity.shape[0])
        if abs(total - (num_segments - 1)) < margin:
            raise BoundaryAdjacentError(
                f"window {i}: score sum {total:.6g} sits at the count-loss kink"
            )
        if total <= 1e-3:
            raise BoundaryAdjacentError(f"window {i}: score sum {total:.6g} too small")


def grad_check(
    model: SpeakerChangeModel,
    x: torch.Tensor,
    targets,
    loss_cfg: LossConfig | None = None,
    eps: float = 1e-5,
) -> float:
    """Max relative error of analytic gradients vs central differences.

    Sweeps every scalar parameter of every module.  Examples adjacent to a
    clamp bound, the count-loss kink, or a fire decision are rejected with
    ``BoundaryAdjacentError`` rather than reported as gradient failures.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    loss_cfg = loss_cfg or LossConfig()
    for param in model.parameters():
        if param.dtype != torch.float64:
            raise ValueError("gradient checking requires double precision")
    _assert_interior(model, x, targets, loss_cfg, eps)

    loss, base_stats = model.window_losses(x, targets, loss_cfg)
    base_pattern = tuple(base_stats["fire_patterns"])
    model.zero_grad()
    loss.backward()
    analytic = _flatten_grads(model)

    def eval_loss():
        with torch.no_grad():
            value, stats = model.window_losses(x, targets, loss_cfg)
        if tuple(stats["fire_patterns"]) != base_pattern:
            raise BoundaryAdjacentError(
                "parameter perturbation flipped a fire decision; pick an "
                "example farther from the threshold"
            )
        return float(value)

    max_rel = 0.0
    flat_index = 0
    with torch.no_grad():
        for param in model.parameters():
            flat = param.view(-1)
            for j in range(flat.numel()):
                original = float(flat[j])
                flat[j] = original + eps
                upper = eval_loss()
                flat[j] = original - eps
                lower = eval_loss()
                flat[j] = original
                fd = (upper - lower) / (2.0 * eps)
                a = float(analytic[flat_index])
                rel = abs(a - fd) / (abs(a) + abs(fd) + 1e-6)
                if rel > max_rel:
                    max_rel = rel
                flat_index += 1
    return max_rel
