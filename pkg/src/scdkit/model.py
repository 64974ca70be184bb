"""Full change-detection pipeline and the frame-labeling baseline.

``SpeakerChangeModel`` chains the encoder, the per-frame difference scorer,
the integrate-and-fire segmenter, and the segment decoder.  Training
consumes fixed-length windows with multi-hot segment identities; inference
consumes raw windows and produces per-input-frame change scores.

``FrameBaseline`` shares the encoder topology but predicts a per-frame
change probability directly, trained against collar-widened binary targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .difference import DifferenceNet, scale_scores
from .encoder import Encoder, EncoderConfig
from .exceptions import AlignmentError, ConfigError, DegenerateScaleError
from .head import Decoder, HeadConfig, count_loss, total_loss
from .integrate_fire import (
    FiredOutput,
    IntegrateFireConfig,
    integrate_and_fire,
    marks_to_frame_scores,
)

SCORE_SOURCES = ("marks", "raw_d")

# guards float rounding when a change time sits exactly on the collar edge
COLLAR_TIE_EPS = 1e-9


@dataclass
class LossConfig:
    """Loss weights and the training-time behavior toggles."""

    label_weight: float = 50.0
    count_weight: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0
    use_focal: bool = True
    use_scaling: bool = True

    def validate(self):
        if self.label_weight < 0 or self.count_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")


@dataclass
class PipelineConfig:
    """Sizing and behavior of every stage of the pipeline."""

    encoder: EncoderConfig
    head: HeadConfig
    fire: IntegrateFireConfig = field(default_factory=IntegrateFireConfig)
    difference_hidden: int = 512
    history_frames: int = 2

    def validate(self):
        self.encoder.validate()
        self.head.validate()
        self.fire.validate()
        if self.head.embed_dim != self.encoder.embed_dim:
            raise ConfigError(
                f"decoder embed_dim {self.head.embed_dim} does not match "
                f"encoder output {self.encoder.embed_dim}"
            )
        if self.difference_hidden < 1 or self.history_frames < 1:
            raise ConfigError("difference_hidden and history_frames must be >= 1")


class SpeakerChangeModel(nn.Module):
    """Encoder, difference scorer, segmenter and decoder, end to end."""

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        self.difference = DifferenceNet(
            embed_dim=cfg.encoder.embed_dim,
            hidden_dim=cfg.difference_hidden,
            history_frames=cfg.history_frames,
        )
        self.decoder = Decoder(cfg.head)

    def encode_and_score(self, x: torch.Tensor):
        """[B, T, F] windows -> encoded [B, T', H] and raw scores [B, T']."""
        h = self.encoder(x)
        return h, self.difference(h)

    def window_losses(self, x: torch.Tensor, targets, loss_cfg: LossConfig):
        """Mean loss over a batch of windows, plus logging statistics.

        ``targets`` is one ``[U_i, C]`` multi-hot tensor per window.  With
        scaling enabled the fired segment count matches ``U_i`` by
        construction up to exact-threshold ties; on a mismatch (tie, or
        scaling disabled) the window falls back to its count loss alone,
        which is the only mechanism left to pull the counts into line.
        With the count loss also disabled no recovery exists, so that case
        raises instead of silently skipping the window.
        """
        loss_cfg.validate()
        if x.shape[0] != len(targets):
            raise AlignmentError(f"{x.shape[0]} windows vs {len(targets)} target sets")
        h, d = self.encode_and_score(x)
        losses = []
        stats = {"windows": len(targets), "aligned": 0, "count_only": 0,
                 "degenerate_scale": 0, "mlfl": 0.0, "quantity": 0.0,
                 "fire_patterns": []}
        for i, identity in enumerate(targets):
            num_segments = identity.shape[0]
            fire_scores = d[i]
            if loss_cfg.use_scaling:
                try:
                    fire_scores, _ = scale_scores(d[i], num_segments)
                except DegenerateScaleError:
                    # all scores clamped to zero: skip scaling this window
                    # and let the count loss push the sum back up
                    stats["degenerate_scale"] += 1
            fired = integrate_and_fire(h[i], fire_scores, self.cfg.fire)
            stats["fire_patterns"].append(fired.boundaries)
            if fired.num_segments != num_segments:
                if loss_cfg.count_weight <= 0:
                    raise AlignmentError(
                        f"window {i}: {fired.num_segments} fired segments vs "
                        f"{num_segments} identity rows, and no count loss or "
                        f"scaling is enabled to correct the count"
                    )
                stats["count_only"] += 1
                count = count_loss(d[i], num_segments)
                stats["quantity"] += float(count.detach())
                losses.append(loss_cfg.count_weight * count)
                continue
            probs = self.decoder(fired.embeddings)
            loss, label_part, count_part = total_loss(
                probs,
                identity,
                d[i],
                label_weight=loss_cfg.label_weight,
                count_weight=loss_cfg.count_weight,
                alpha=loss_cfg.alpha,
                gamma=loss_cfg.gamma,
                use_focal=loss_cfg.use_focal,
                return_parts=True,
            )
            stats["aligned"] += 1
            stats["mlfl"] += float(label_part)
            stats["quantity"] += float(count_part)
            losses.append(loss)
        if stats["aligned"]:
            stats["mlfl"] /= stats["aligned"]
        stats["quantity"] /= stats["windows"]
        return torch.stack(losses).mean(), stats

    def segment_window(self, x: torch.Tensor) -> tuple[FiredOutput, torch.Tensor]:
        """Inference on one [T, F] window: raw (unscaled) scores drive firing."""
        if x.ndim != 2:
            raise ValueError(f"expected [T, F], got {tuple(x.shape)}")
        h, d = self.encode_and_score(x.unsqueeze(0))
        return integrate_and_fire(h[0], d[0], self.cfg.fire), d[0]

    def window_frame_scores(self, x: torch.Tensor, score_source: str = "marks") -> np.ndarray:
        """Per-input-frame change scores for one window.

        ``marks`` places each fire on the last input frame of its encoded
        frame; ``raw_d`` spreads each raw score over the frames it covers.
        """
        if score_source not in SCORE_SOURCES:
            raise ValueError(f"score_source must be one of {SCORE_SOURCES}")
        num_frames = x.shape[0]
        factor = self.cfg.encoder.downsampling_factor
        with torch.no_grad():
            fired, d = self.segment_window(x)
        if score_source == "marks":
            return marks_to_frame_scores(fired.marks, factor, num_frames)
        return np.repeat(d.numpy(), factor)[:num_frames]


def collar_targets(
    change_times_s,
    num_encoded: int,
    encoded_shift_s: float,
    collar_s: float = 0.1,
) -> torch.Tensor:
    """Binary per-encoded-frame targets for the baseline.

    Encoded frame ``t`` represents the boundary instant ``(t+1) * shift``;
    it is positive when that instant lies within ``collar_s`` of any
    reference change time.
    """
    if num_encoded < 1 or encoded_shift_s <= 0 or collar_s < 0:
        raise ValueError("need num_encoded >= 1, positive shift, nonnegative collar")
    targets = torch.zeros(num_encoded, dtype=torch.float64)
    times = (torch.arange(num_encoded, dtype=torch.float64) + 1.0) * encoded_shift_s
    for change in change_times_s:
        targets[(times - float(change)).abs() <= collar_s + COLLAR_TIE_EPS] = 1.0
    return targets


class FrameBaseline(nn.Module):
    """Encoder plus a per-frame sigmoid change classifier."""

    def __init__(self, encoder_cfg: EncoderConfig):
        super().__init__()
        self.encoder = Encoder(encoder_cfg)
        self.head = nn.Linear(encoder_cfg.embed_dim, 1)
        self.double()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[B, T, F] -> per-encoded-frame logits [B, T']."""
        return self.head(self.encoder(x)).squeeze(-1)

    def window_losses(self, x: torch.Tensor, targets: torch.Tensor):
        """Binary cross-entropy against collar targets [B, T']."""
        logits = self.forward(x)
        if logits.shape != targets.shape:
            raise AlignmentError(
                f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}"
            )
        loss = nn.functional.binary_cross_entropy_with_logits(logits, targets)
        return loss, {"windows": x.shape[0]}

    def window_frame_scores(self, x: torch.Tensor) -> np.ndarray:
        """Per-input-frame change probabilities for one [T, F] window."""
        num_frames = x.shape[0]
        factor = self.encoder.cfg.downsampling_factor
        with torch.no_grad():
            probs = torch.sigmoid(self.forward(x.unsqueeze(0))[0])
        return np.repeat(probs.numpy(), factor)[:num_frames]
