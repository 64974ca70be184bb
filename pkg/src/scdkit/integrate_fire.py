"""Integrate-and-fire segmentation of encoded frame sequences.

Difference scores are accumulated frame by frame while the frame embeddings
are integrated with weight ``1 - d_t``.  Whenever the accumulated difference
strictly exceeds the threshold, the integrated embedding is fired as one
segment-level speaker embedding, the integration state restarts from the
current frame, and the current score is split so the leftover part seeds
the next accumulation.  After the last frame the pending integration is
flushed as the final segment embedding (without a mark).

Gradients flow through the integration weights and the score splits; the
fire decisions themselves are piecewise-constant and receive none.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ConfigError, NumericalError

INIT_MODES = ("first_frame", "zero")


@dataclass
class IntegrateFireConfig:
    """Threshold and integration-state initialization.

    ``first_frame`` seeds the integration with the first frame embedding
    (which therefore weighs into the first segment twice); ``zero`` starts
    from a zero state and is exposed for ablation.
    """

    threshold: float = 1.0
    integration_init: str = "first_frame"

    def validate(self):
        if self.threshold <= 0:
            raise ConfigError("threshold must be positive")
        if self.integration_init not in INIT_MODES:
            raise ConfigError(f"integration_init must be one of {INIT_MODES}")


@dataclass
class FiredOutput:
    """Fired segment embeddings plus the per-frame mark sequence.

    ``embeddings`` holds ``fired_count + 1`` rows (the trailing flush has no
    mark); ``boundaries`` are the 0-based encoded-frame indices of fires.
    """

    embeddings: torch.Tensor
    marks: np.ndarray
    boundaries: tuple[int, ...]
    residual: float

    @property
    def fired_count(self) -> int:
        return len(self.boundaries)

    @property
    def num_segments(self) -> int:
        return self.embeddings.shape[0]


def integrate_and_fire(
    h: torch.Tensor, d: torch.Tensor, cfg: IntegrateFireConfig
) -> FiredOutput:
    """Run the accumulation over a single sequence.

    ``h`` is ``[T', H]``, ``d`` the nonnegative per-frame scores ``[T']``.
    Differentiable with respect to both along the realized firing pattern.
    """
    cfg.validate()
    if h.ndim != 2 or d.ndim != 1 or h.shape[0] != d.shape[0]:
        raise ValueError(f"shape mismatch: h {tuple(h.shape)} vs d {tuple(d.shape)}")
    if h.shape[0] < 1:
        raise ValueError("need at least one frame")
    if not torch.isfinite(d).all():
        bad = int(torch.nonzero(~torch.isfinite(d))[0])
        raise NumericalError(f"non-finite difference score at frame {bad}")
    if not torch.isfinite(h).all():
        bad = int(torch.nonzero(~torch.isfinite(h).all(dim=1))[0])
        raise NumericalError(f"non-finite embedding at frame {bad}")
    if (d < 0).any():
        bad = int(torch.nonzero(d < 0)[0])
        raise ValueError(f"negative difference score at frame {bad}")

    threshold = cfg.threshold
    num_frames = h.shape[0]
    d_acc = torch.zeros((), dtype=h.dtype, device=h.device)
    if cfg.integration_init == "first_frame":
        h_acc = h[0]
    else:
        h_acc = torch.zeros_like(h[0])

    embeddings = []
    marks = np.zeros(num_frames, dtype=np.int8)
    boundaries = []
    for t in range(num_frames):
        d_prev = d_acc
        d_acc = d_acc + d[t]
        h_acc = h_acc + (1.0 - d[t]) * h[t]
        if d_acc.item() > threshold:
            embeddings.append(h_acc)
            h_acc = h[t]
            # split the current score: the first part tops the accumulator
            # up to the threshold, the second part seeds the next segment
            part1 = threshold - d_prev
            d_acc = d[t] - part1
            marks[t] = 1
            boundaries.append(t)
    embeddings.append(h_acc)
    return FiredOutput(
        embeddings=torch.stack(embeddings),
        marks=marks,
        boundaries=tuple(boundaries),
        residual=float(d_acc.item()),
    )


@dataclass
class FireStep:
    """One row of the integrate-and-fire trace."""

    index: int
    score: float
    acc_before: float
    fired: bool
    part_used: float
    part_carried: float
    acc_after: float


def trace_integrate_and_fire(d, cfg: IntegrateFireConfig) -> list[FireStep]:
    """Plain-float per-step trace of the accumulator (firing depends only on d)."""
    cfg.validate()
    steps = []
    d_acc = 0.0
    for t, score in enumerate(d):
        score = float(score)
        if not np.isfinite(score):
            raise NumericalError(f"non-finite difference score at frame {t}")
        if score < 0:
            raise ValueError(f"negative difference score at frame {t}")
        d_prev = d_acc
        d_acc = d_prev + score
        acc_before = d_acc
        fired = d_acc > cfg.threshold
        part1 = part2 = 0.0
        if fired:
            part1 = cfg.threshold - d_prev
            part2 = score - part1
            d_acc = part2
        steps.append(
            FireStep(
                index=t,
                score=score,
                acc_before=acc_before,
                fired=fired,
                part_used=part1,
                part_carried=part2,
                acc_after=d_acc,
            )
        )
    return steps


def marks_to_frame_scores(marks, factor: int, num_frames: int) -> np.ndarray:
    """Place encoded-frame marks onto the input-frame timeline.

    A mark at encoded index ``t`` lands on the last input frame covered by
    that encoded frame, ``min(t * factor + factor - 1, num_frames - 1)``;
    all other frames score zero.
    """
    marks = np.asarray(marks)
    if factor < 1 or num_frames < 1:
        raise ValueError("factor and num_frames must be >= 1")
    expected = -(-num_frames // factor)
    if marks.shape[0] != expected:
        raise ValueError(
            f"mark count {marks.shape[0]} inconsistent with ceil({num_frames}/{factor}) = {expected}"
        )
    scores = np.zeros(num_frames)
    for t in np.nonzero(marks)[0]:
        scores[min(int(t) * factor + factor - 1, num_frames - 1)] = 1.0
    return scores
