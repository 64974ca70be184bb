"""Run configuration: one YAML document wiring every module together.

The document has seven sections (data, encoder, difference, fire, head,
train, infer).  Missing keys fall back to the defaults below; unknown
sections or keys are rejected up front.  The merged dictionary is what a
checkpoint stores as its config snapshot, so it round-trips through the
same validation.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .data import SynthConfig
from .encoder import EncoderConfig
from .exceptions import ConfigError
from .head import HeadConfig
from .inference import InferenceConfig
from .integrate_fire import IntegrateFireConfig
from .model import FrameBaseline, LossConfig, PipelineConfig, SpeakerChangeModel
from .trainer import TrainConfig

DEFAULTS: dict = {
    "data": {
        "num_speakers": 4,
        "feature_dim": 24,
        "cluster_separation": 10.0,
        "turn_duration_range_s": [1.5, 4.0],
        "session_duration_s": 150.0,
        "overlap_fraction": 0.25,
        "frame_shift_s": 0.010,
        "train_sessions": 8,
        "dev_sessions": 2,
        "test_sessions": 2,
        "seed": 0,
    },
    "encoder": {
        "feature_dim": 24,
        "num_tdnn_layers": 4,
        "tdnn_channels": 48,
        "tdnn_context": [-2, -1, 0, 1, 2],
        "downsampling_factor": 8,
        "bilstm_layers": 2,
        "bilstm_hidden": 32,
    },
    "difference": {
        "hidden_dim": 64,
        "history_ms": 160.0,
    },
    "fire": {
        "threshold": 1.0,
        "integration_init": "first_frame",
    },
    "head": {
        "hidden_dim": 64,
        "norm_radius": 12.0,
        "use_length_norm": True,
    },
    "train": {
        "window_s": 4.0,
        "batch_size": 16,
        "peak_lr": 2e-3,
        "warmup_frac": 0.05,
        "hold_frac": 0.50,
        "total_steps": 1000,
        "seed": 0,
        "augment_snr_db": [10.0, 40.0],
        "collar_s": 0.1,
        "log_every": 10,
        "dev_eval_every": 0,
        "label_weight": 50.0,
        "count_weight": 1.0,
        "alpha": 0.25,
        "gamma": 2.0,
        "use_focal": True,
        "use_scaling": True,
    },
    "infer": {
        "window_s": 4.0,
        "overlap_frac": 0.8,
        "theta": 0.3,
        "score_source": "marks",
    },
}

# offsets keeping the synthesis streams of the three splits disjoint
SPLIT_SEED_OFFSETS = {"train": 0, "dev": 1000, "test": 2000}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def validate_config(cfg: dict) -> dict:
    """Schema-check a raw mapping and fill defaults; returns the merged dict."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    merged = default_config()
    for section, values in cfg.items():
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        bad = set(values) - set(DEFAULTS[section])
        if bad:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
        merged[section].update(values)

    if merged["encoder"]["feature_dim"] != merged["data"]["feature_dim"]:
        raise ConfigError(
            "encoder.feature_dim must match data.feature_dim "
            f"({merged['encoder']['feature_dim']} vs {merged['data']['feature_dim']})"
        )
    # construct every typed config so their own validation runs
    try:
        synth_config(merged)
        pipeline_config(merged)
        train_config(merged)
        loss_config(merged)
        inference_config(merged)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return merged


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed config {path}: {err}") from err
    return validate_config(raw or {})


def synth_config(cfg: dict, split: str = "train", index: int = 0) -> SynthConfig:
    """Per-session generator settings; seeds are disjoint across splits."""
    if split not in SPLIT_SEED_OFFSETS:
        raise ConfigError(f"unknown split {split!r}")
    data = cfg["data"]
    sc = SynthConfig(
        num_speakers=data["num_speakers"],
        feature_dim=data["feature_dim"],
        cluster_separation=data["cluster_separation"],
        turn_duration_range_s=tuple(data["turn_duration_range_s"]),
        session_duration_s=data["session_duration_s"],
        overlap_fraction=data["overlap_fraction"],
        frame_shift_s=data["frame_shift_s"],
        rng_seed=data["seed"] + SPLIT_SEED_OFFSETS[split] + index,
    )
    sc.validate()
    return sc


def split_session_count(cfg: dict, split: str) -> int:
    key = {"train": "train_sessions", "dev": "dev_sessions", "test": "test_sessions"}
    if split not in key:
        raise ConfigError(f"unknown split {split!r}")
    count = cfg["data"][key[split]]
    if not isinstance(count, int) or count < 1:
        raise ConfigError(f"data.{key[split]} must be a positive integer")
    return count


def encoder_config(cfg: dict) -> EncoderConfig:
    enc = cfg["encoder"]
    ec = EncoderConfig(
        feature_dim=enc["feature_dim"],
        num_tdnn_layers=enc["num_tdnn_layers"],
        tdnn_channels=enc["tdnn_channels"],
        tdnn_context=tuple(enc["tdnn_context"]),
        downsampling_factor=enc["downsampling_factor"],
        bilstm_layers=enc["bilstm_layers"],
        bilstm_hidden=enc["bilstm_hidden"],
    )
    ec.validate()
    return ec


def history_frames(cfg: dict) -> int:
    """History length in encoded frames, converted from milliseconds."""
    shift_ms = cfg["data"]["frame_shift_s"] * 1000.0
    encoded_shift_ms = shift_ms * cfg["encoder"]["downsampling_factor"]
    frames = round(cfg["difference"]["history_ms"] / encoded_shift_ms)
    return max(1, int(frames))


def pipeline_config(cfg: dict) -> PipelineConfig:
    enc = encoder_config(cfg)
    head = HeadConfig(
        embed_dim=enc.embed_dim,
        num_speakers=cfg["data"]["num_speakers"],
        hidden_dim=cfg["head"]["hidden_dim"],
        norm_radius=cfg["head"]["norm_radius"],
        use_length_norm=cfg["head"]["use_length_norm"],
    )
    fire = IntegrateFireConfig(
        threshold=cfg["fire"]["threshold"],
        integration_init=cfg["fire"]["integration_init"],
    )
    pc = PipelineConfig(
        encoder=enc,
        head=head,
        fire=fire,
        difference_hidden=cfg["difference"]["hidden_dim"],
        history_frames=history_frames(cfg),
    )
    pc.validate()
    return pc


def train_config(cfg: dict) -> TrainConfig:
    tr = cfg["train"]
    snr = tr["augment_snr_db"]
    tc = TrainConfig(
        window_s=tr["window_s"],
        batch_size=tr["batch_size"],
        peak_lr=tr["peak_lr"],
        warmup_frac=tr["warmup_frac"],
        hold_frac=tr["hold_frac"],
        total_steps=tr["total_steps"],
        seed=tr["seed"],
        augment_snr_db=None if snr is None else tuple(snr),
        collar_s=tr["collar_s"],
        log_every=tr["log_every"],
        dev_eval_every=tr["dev_eval_every"],
    )
    tc.validate()
    return tc


def loss_config(cfg: dict) -> LossConfig:
    tr = cfg["train"]
    lc = LossConfig(
        label_weight=tr["label_weight"],
        count_weight=tr["count_weight"],
        alpha=tr["alpha"],
        gamma=tr["gamma"],
        use_focal=tr["use_focal"],
        use_scaling=tr["use_scaling"],
    )
    lc.validate()
    return lc


def inference_config(cfg: dict) -> InferenceConfig:
    inf = cfg["infer"]
    ic = InferenceConfig(
        window_s=inf["window_s"],
        overlap_frac=inf["overlap_frac"],
        theta=inf["theta"],
        score_source=inf["score_source"],
    )
    ic.validate()
    return ic


def build_model(snapshot: dict, kind: str):
    """Rebuild a model of the given kind from a checkpoint's config snapshot."""
    merged = validate_config(snapshot)
    if kind == "pipeline":
        return SpeakerChangeModel(pipeline_config(merged))
    if kind == "baseline":
        return FrameBaseline(encoder_config(merged))
    raise ConfigError(f"unknown checkpoint kind {kind!r}")
