"""Frame-level speaker embedding encoder.

A stack of local-context convolutional layers (strided for temporal
downsampling, edge-replicated padding so the length contract
``T' = ceil(T / D)`` holds for every input length) followed by a
bidirectional LSTM.  All parameters are float64 so the analytic gradients
can be verified against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import FeatureSequence
from .exceptions import ConfigError

SUPPORTED_FACTORS = (1, 2, 4, 8, 16)


def downsampling_strides(factor: int, num_layers: int = 4) -> tuple[int, ...]:
    """Per-layer strides realizing a total downsampling ``factor``.

    Stride-2 layers fill in from the deepest layer first:
    1 -> (1,1,1,1), 2 -> (1,1,1,2), 4 -> (1,1,2,2), 8 -> (1,2,2,2),
    16 -> (2,2,2,2).
    """
    if factor not in SUPPORTED_FACTORS:
        raise ConfigError(
            f"unsupported downsampling factor {factor}; choose from {SUPPORTED_FACTORS}"
        )
    twos = factor.bit_length() - 1
    if twos > num_layers:
        raise ConfigError(f"factor {factor} needs more than {num_layers} stride-2 layers")
    return (1,) * (num_layers - twos) + (2,) * twos


@dataclass
class EncoderConfig:
    """Encoder topology; defaults follow the production-scale configuration."""

    feature_dim: int = 59
    num_tdnn_layers: int = 4
    tdnn_channels: int = 512
    tdnn_context: tuple[int, ...] = (-2, -1, 0, 1, 2)
    downsampling_factor: int = 8
    bilstm_layers: int = 2
    bilstm_hidden: int = 256

    def validate(self):
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.num_tdnn_layers < 1:
            raise ConfigError("need at least one convolutional layer")
        if self.tdnn_channels < 1:
            raise ConfigError("tdnn_channels must be >= 1")
        radius = (len(self.tdnn_context) - 1) // 2
        if tuple(self.tdnn_context) != tuple(range(-radius, radius + 1)):
            raise ConfigError("tdnn_context must be a contiguous symmetric range")
        try:
            downsampling_strides(self.downsampling_factor, self.num_tdnn_layers)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.bilstm_layers < 1 or self.bilstm_hidden < 1:
            raise ConfigError("bilstm_layers and bilstm_hidden must be >= 1")

    @property
    def embed_dim(self) -> int:
        return 2 * self.bilstm_hidden

    @property
    def strides(self) -> tuple[int, ...]:
        return downsampling_strides(self.downsampling_factor, self.num_tdnn_layers)


@dataclass
class EncodedSequence:
    """``T' x H`` frame-level speaker embeddings with origin metadata."""

    frames: torch.Tensor
    downsampling_factor: int
    frame_shift_s: float = 0.010
    source_id: str = ""

    def __post_init__(self):
        if self.frames.ndim != 2:
            raise ValueError("encoded frames must be a T' x H matrix")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.frames.shape[1]

    @property
    def encoded_shift_s(self) -> float:
        return self.frame_shift_s * self.downsampling_factor


class Encoder(nn.Module):
    """Strided local-context convolutions followed by a bidirectional LSTM."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        kernel = len(cfg.tdnn_context)
        pad = (kernel - 1) // 2
        convs = []
        in_ch = cfg.feature_dim
        for stride in cfg.strides:
            convs.append(
                nn.Conv1d(
                    in_ch,
                    cfg.tdnn_channels,
                    kernel_size=kernel,
                    stride=stride,
                    padding=pad,
                    padding_mode="replicate",
                )
            )
            in_ch = cfg.tdnn_channels
        self.convs = nn.ModuleList(convs)
        self.lstm = nn.LSTM(
            cfg.tdnn_channels,
            cfg.bilstm_hidden,
            num_layers=cfg.bilstm_layers,
            bidirectional=True,
            batch_first=True,
        )
        self.double()
        self._init_forget_gate_bias()

    def _init_forget_gate_bias(self):
        # default uniform fan-in init elsewhere; forget-gate bias pinned to 1
        h = self.cfg.bilstm_hidden
        with torch.no_grad():
            for name, param in self.lstm.named_parameters():
                if name.startswith("bias_ih"):
                    param[h : 2 * h] = 1.0
                elif name.startswith("bias_hh"):
                    param[h : 2 * h] = 0.0

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map ``[B, T, F]`` features to ``[B, T', H]`` embeddings."""
        if x.ndim != 3 or x.shape[2] != self.cfg.feature_dim:
            raise ValueError(
                f"expected input [B, T, {self.cfg.feature_dim}], got {tuple(x.shape)}"
            )
        if x.shape[1] < self.cfg.downsampling_factor:
            raise ValueError("input shorter than the downsampling factor")
        y = x.transpose(1, 2)
        for conv in self.convs:
            y = torch.relu(conv(y))
        y = y.transpose(1, 2)
        out, _ = self.lstm(y)
        return out

    def encode_sequence(self, features: FeatureSequence) -> EncodedSequence:
        """Typed single-sequence wrapper around :meth:`forward`."""
        x = torch.as_tensor(features.frames, dtype=torch.float64).unsqueeze(0)
        out = self.forward(x).squeeze(0)
        expected = -(-features.num_frames // self.cfg.downsampling_factor)
        if out.shape[0] != expected:
            raise ConfigError(
                f"length contract violated: got {out.shape[0]}, expected {expected}"
            )
        return EncodedSequence(
            out,
            downsampling_factor=self.cfg.downsampling_factor,
            frame_shift_s=features.frame_shift_s,
            source_id=features.source_id,
        )
