"""Segment-embedding decoder and the training losses.

Fired embeddings are length-normalized onto a fixed-radius sphere, decoded
into per-speaker activity probabilities, and scored against the multi-hot
segment identities with a multi-label focal loss.  A separate count loss
ties the sum of the raw difference scores to the number of boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .exceptions import AlignmentError, ConfigError, DegenerateEmbeddingError

PROB_EPS = 1e-7


@dataclass
class HeadConfig:
    """Decoder sizing and embedding normalization."""

    embed_dim: int
    num_speakers: int
    hidden_dim: int = 512
    norm_radius: float = 12.0
    use_length_norm: bool = True

    def validate(self):
        if self.embed_dim < 1 or self.num_speakers < 1 or self.hidden_dim < 1:
            raise ConfigError("embed_dim, num_speakers, hidden_dim must be >= 1")
        if self.norm_radius <= 0:
            raise ConfigError("norm_radius must be positive")


def length_normalize(e: torch.Tensor, radius: float = 12.0) -> torch.Tensor:
    """Scale each embedding to Euclidean norm ``radius``.

    A zero embedding has no direction to preserve, so it is rejected.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    squeeze = e.ndim == 1
    if squeeze:
        e = e.unsqueeze(0)
    norms = e.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        bad = int(torch.nonzero(norms.squeeze(-1) == 0)[0])
        raise DegenerateEmbeddingError(f"zero embedding at segment {bad}")
    out = e * (radius / norms)
    return out.squeeze(0) if squeeze else out


class Decoder(nn.Module):
    """Two-layer net mapping a segment embedding to speaker probabilities."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.fc1 = nn.Linear(cfg.embed_dim, cfg.hidden_dim)
        self.fc2 = nn.Linear(cfg.hidden_dim, cfg.num_speakers)
        self.double()

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        """[U, embed_dim] embeddings -> [U, num_speakers] probabilities."""
        if e.ndim != 2 or e.shape[1] != self.cfg.embed_dim:
            raise ValueError(
                f"expected [U, {self.cfg.embed_dim}], got {tuple(e.shape)}"
            )
        if self.cfg.use_length_norm:
            e = length_normalize(e, self.cfg.norm_radius)
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(e))))


def multilabel_focal_loss(
    probs: torch.Tensor,
    targets: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
    reduction: str = "mean",
) -> torch.Tensor:
    """Focal loss over independent per-speaker activations.

    Per segment the loss averages over speakers
    ``-alpha * (1-p)^gamma * y * log p - (1-alpha) * p^gamma * (1-y) * log(1-p)``.
    ``reduction='mean'`` averages the per-segment values; ``'none'`` returns
    them as a ``[U]`` tensor.
    """
    if probs.shape != targets.shape:
        raise AlignmentError(
            f"probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}"
        )
    if reduction not in ("mean", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = targets.to(p.dtype)
    pos = -alpha * (1.0 - p) ** gamma * y * torch.log(p)
    neg = -(1.0 - alpha) * p**gamma * (1.0 - y) * torch.log(1.0 - p)
    per_segment = (pos + neg).mean(dim=-1)
    if reduction == "mean":
        return per_segment.mean()
    return per_segment


def count_loss(d: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Absolute gap between the summed raw scores and the boundary count.

    Operates on the unscaled scores: with scaling active the scaled sum
    matches the boundary count by construction, so the supervision signal
    has to reach the network through the raw values.
    """
    if d.ndim != 1:
        raise ValueError(f"expected 1-D scores, got shape {tuple(d.shape)}")
    if num_segments < 1:
        raise ValueError("num_segments must be >= 1")
    return (float(num_segments - 1) - d.sum()).abs()


def total_loss(
    probs: torch.Tensor,
    targets: torch.Tensor,
    d: torch.Tensor,
    label_weight: float = 50.0,
    count_weight: float = 1.0,
    alpha: float = 0.25,
    gamma: float = 2.0,
    use_focal: bool = True,
    return_parts: bool = False,
):
    """Weighted sum of the identity loss and the count loss.

    ``use_focal=False`` swaps the focal weighting for plain binary
    cross-entropy (realized as the focal form at alpha=0.5, gamma=0, times
    two to undo the halving).
    """
    if probs.shape[0] != targets.shape[0]:
        raise AlignmentError(
            f"{probs.shape[0]} decoded segments vs {targets.shape[0]} identity rows"
        )
    if use_focal:
        label = multilabel_focal_loss(probs, targets, alpha=alpha, gamma=gamma)
    else:
        label = 2.0 * multilabel_focal_loss(probs, targets, alpha=0.5, gamma=0.0)
    count = count_loss(d, targets.shape[0])
    loss = label_weight * label + count_weight * count
    if return_parts:
        return loss, label.detach(), count.detach()
    return loss
