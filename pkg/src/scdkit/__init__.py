"""Sequence-level speaker change detection toolkit.

Pipeline: feature windows are encoded by a strided convolutional stack and
a bidirectional recurrent network, scored frame by frame for speaker
difference, segmented by an integrate-and-fire accumulator, and decoded
into per-segment speaker identities.  Supervision needs only the ordered
speaker identities of each window, never frame-level change labels.
"""

from .data import (
    FeatureSequence,
    Segment,
    SegmentLabels,
    SpeakerIdentitySequence,
    SynthConfig,
    TrainingExample,
    add_noise,
    generate_session,
    load_features,
    load_labels,
    sample_training_window,
    store_features,
    store_labels,
)
from .difference import DifferenceNet, history_delta, scale_scores
from .encoder import EncodedSequence, Encoder, EncoderConfig, downsampling_strides
from .exceptions import (
    AlignmentError,
    BoundaryAdjacentError,
    ConfigError,
    DegenerateEmbeddingError,
    DegenerateScaleError,
    MetricError,
    NumericalError,
    ParseError,
    ScdError,
    TrainingDivergedError,
)
from .head import (
    Decoder,
    HeadConfig,
    count_loss,
    length_normalize,
    multilabel_focal_loss,
    total_loss,
)
from .inference import (
    ChangePointSet,
    InferenceConfig,
    MetricReport,
    evaluate_sessions,
    peak_pick,
    purity_coverage,
    score_session,
    sliding_windows,
    tune_threshold,
)
from .integrate_fire import (
    FiredOutput,
    IntegrateFireConfig,
    integrate_and_fire,
    marks_to_frame_scores,
    trace_integrate_and_fire,
)
from .model import (
    FrameBaseline,
    LossConfig,
    PipelineConfig,
    SpeakerChangeModel,
    collar_targets,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    grad_check,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train,
    train_frame_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "BoundaryAdjacentError",
    "ChangePointSet",
    "Checkpoint",
    "ConfigError",
    "Decoder",
    "DegenerateEmbeddingError",
    "DegenerateScaleError",
    "DifferenceNet",
    "EncodedSequence",
    "Encoder",
    "EncoderConfig",
    "FeatureSequence",
    "FiredOutput",
    "FrameBaseline",
    "HeadConfig",
    "InferenceConfig",
    "IntegrateFireConfig",
    "LossConfig",
    "MetricError",
    "MetricReport",
    "NumericalError",
    "ParseError",
    "PipelineConfig",
    "ScdError",
    "Segment",
    "SegmentLabels",
    "SpeakerChangeModel",
    "SpeakerIdentitySequence",
    "SynthConfig",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainingExample",
    "add_noise",
    "collar_targets",
    "count_loss",
    "downsampling_strides",
    "evaluate_sessions",
    "generate_session",
    "grad_check",
    "history_delta",
    "integrate_and_fire",
    "length_normalize",
    "load_checkpoint",
    "load_features",
    "load_labels",
    "lr_schedule",
    "marks_to_frame_scores",
    "multilabel_focal_loss",
    "peak_pick",
    "purity_coverage",
    "sample_training_window",
    "save_checkpoint",
    "scale_scores",
    "score_session",
    "sliding_windows",
    "store_features",
    "store_labels",
    "total_loss",
    "trace_integrate_and_fire",
    "train",
    "train_frame_baseline",
    "tune_threshold",
]
