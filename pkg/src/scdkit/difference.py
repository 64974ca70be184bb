"""Per-frame speaker-difference scoring and the training-time score scaling.

Each encoded frame is compared against the mean of its preceding history
chunk; the offset and the frame itself feed a two-layer network whose
output is clamped to [0, 1].  During training the scores are rescaled so
they sum to the number of reference change points, which aligns the number
of fired segments with the target identity sequence.
"""

from __future__ import annotations

import torch
from torch import nn

from .exceptions import DegenerateScaleError, NumericalError

# Deliberate overshoot of the scaled-score sum.  The integrate-and-fire
# threshold test is strict, so a sum that lands a few ulps *below* the
# change count would drop the final fire; a margin far above accumulated
# rounding error (~1e-13) but far below the 1e-6 sum tolerance keeps the
# fired-segment count deterministic.
SCALE_MARGIN = 1e-8


def history_delta(h: torch.Tensor, history_frames: int) -> torch.Tensor:
    """Offset of each frame from the mean of its preceding history chunk.

    For the first frames only the available history is averaged; the very
    first frame uses itself as history, so its offset is exactly zero.
    Accepts ``[T, H]`` or ``[B, T, H]``.
    """
    if history_frames < 1:
        raise ValueError("history_frames must be >= 1")
    squeeze = h.ndim == 2
    if squeeze:
        h = h.unsqueeze(0)
    num_frames = h.shape[1]
    prefix = torch.cumsum(h, dim=1)
    prefix = torch.cat([torch.zeros_like(prefix[:, :1]), prefix], dim=1)
    t = torch.arange(num_frames, device=h.device)
    lo = torch.clamp(t - history_frames, min=0)
    count = (t - lo).clamp(min=1).to(h.dtype)
    hist_mean = (prefix[:, t] - prefix[:, lo]) / count.unsqueeze(-1)
    delta = h - hist_mean
    # first frame: self-history convention, offset is exactly zero
    delta = torch.cat([torch.zeros_like(delta[:, :1]), delta[:, 1:]], dim=1)
    return delta.squeeze(0) if squeeze else delta


class DifferenceNet(nn.Module):
    """Two-layer scorer mapping [history offset; frame] to a scalar in [0, 1].

    The raw frame embedding joins the history offset to keep silence and
    noise from dominating the difference estimate.
    """

    def __init__(self, embed_dim: int, hidden_dim: int = 512, history_frames: int = 2):
        super().__init__()
        if history_frames < 1:
            raise ValueError("history_frames must be >= 1")
        self.history_frames = history_frames
        self.fc1 = nn.Linear(2 * embed_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, 1)
        # calibrate the initial scores to the sparsity of real change points
        # (a few per window, dozens of frames).  Starting mid-range makes the
        # count loss huge at birth and its first steps slam every raw score
        # through the lower clamp, where the gradient is zero and training
        # cannot recover; starting small and tight keeps that loss gentle
        # while leaving the clamp unsaturated in both directions.
        with torch.no_grad():
            self.fc2.weight.mul_(0.1)
            self.fc2.bias.fill_(0.05)
        self.double()

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """Raw difference scores ``d`` in [0, 1]; shape ``[T]`` or ``[B, T]``."""
        delta = history_delta(h, self.history_frames)
        z = torch.cat([delta, h], dim=-1)
        raw = self.fc2(torch.relu(self.fc1(z))).squeeze(-1)
        if not torch.isfinite(raw).all():
            bad = torch.nonzero(~torch.isfinite(raw))[0].tolist()
            raise NumericalError(f"non-finite difference score at frame index {bad}")
        return torch.clamp(raw, 0.0, 1.0)


def scale_scores(d: torch.Tensor, num_segments: int):
    """Rescale raw scores so they sum to the reference change count.

    Returns ``(scaled, scale)`` where ``scale = (U - 1 + margin) / sum(d)``;
    gradients flow through both factors.  With a single target segment the
    scores are zeroed (no change point should fire).  All-zero scores with
    ``U > 1`` leave the scale undefined and raise ``DegenerateScaleError``.
    """
    if d.ndim != 1:
        raise ValueError("scale_scores expects a single score vector")
    if num_segments < 1:
        raise ValueError("num_segments must be >= 1")
    if num_segments == 1:
        zero = torch.zeros((), dtype=d.dtype, device=d.device)
        return d * zero, zero
    total = d.sum()
    if total.item() <= 0.0:
        raise DegenerateScaleError(
            f"sum of difference scores is {total.item()} with {num_segments} target segments"
        )
    scale = (num_segments - 1 + SCALE_MARGIN) / total
    return d * scale, scale
