"""Synthetic session generation, annotation handling and training-window sampling.

Sessions are synthesized directly in feature space: each speaker occupies a
Gaussian cluster, turns alternate between speakers, and optional cross-talk
regions overlap adjacent turns.  The same module parses/serializes the two
plain-text interchange formats:

* feature file -- header line ``T F frame_shift_s source_id`` followed by
  ``T`` whitespace-separated rows of ``F`` decimal values;
* label file   -- one segment per line, ``speaker start_s end_s`` in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ParseError


@dataclass
class FeatureSequence:
    """A ``T x F`` matrix of per-frame features plus frame-shift metadata."""

    frames: np.ndarray
    frame_shift_s: float = 0.010
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("features must be a T x F matrix with T >= 1")
        if not np.isfinite(self.frames).all():
            raise ValueError("features contain non-finite values")
        if self.frame_shift_s <= 0:
            raise ValueError("frame_shift_s must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.frame_shift_s


@dataclass(frozen=True)
class Segment:
    start_s: float
    end_s: float
    speaker: str

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class SegmentLabels:
    """Time-stamped, possibly overlapping reference speaker segments."""

    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        for seg in self.segments:
            if seg.end_s <= seg.start_s:
                raise ValueError(f"empty segment {seg}")

    def speakers(self) -> list[str]:
        """Sorted catalog of speaker ids appearing in the labels."""
        return sorted({seg.speaker for seg in self.segments})

    def active_at(self, time_s: float) -> frozenset[str]:
        """Set of speakers whose segments contain ``time_s`` (half-open)."""
        return frozenset(
            seg.speaker for seg in self.segments if seg.start_s <= time_s < seg.end_s
        )

    def change_points(self, start_s: float, end_s: float) -> list[float]:
        """Instants strictly inside [start_s, end_s) where the active set changes."""
        times, _ = active_set_sweep(self, start_s, end_s)
        return times


@dataclass
class SpeakerIdentitySequence:
    """Segment-level multi-hot speaker targets over a fixed catalog."""

    targets: np.ndarray  # U x C, entries in {0, 1}
    catalog: tuple[str, ...]

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim != 2 or self.targets.shape[0] < 1:
            raise ValueError("targets must be a U x C matrix with U >= 1")
        if self.targets.shape[1] != len(self.catalog):
            raise ValueError("target width must match catalog size")
        if not ((self.targets == 0) | (self.targets == 1)).all():
            raise ValueError("targets must be 0/1 valued")
        if (self.targets.sum(axis=1) < 1).any():
            raise ValueError("every target must have at least one active speaker")
        for u in range(1, self.targets.shape[0]):
            if (self.targets[u] == self.targets[u - 1]).all():
                raise ValueError("consecutive targets must differ")

    @property
    def num_segments(self) -> int:
        return self.targets.shape[0]


@dataclass
class TrainingExample:
    """A feature window, its identity sequence and the sweep's change times.

    ``change_times_s`` is relative to the window start and kept for the
    frame-level baseline and diagnostics only; the sequence-level model
    never sees it.
    """

    features: FeatureSequence
    identity_sequence: SpeakerIdentitySequence
    change_times_s: list[float]

    def __post_init__(self):
        if len(self.change_times_s) != self.identity_sequence.num_segments - 1:
            raise ValueError("need exactly U-1 change times")
        for a, b in zip(self.change_times_s, self.change_times_s[1:]):
            if b <= a:
                raise ValueError("change times must be strictly increasing")


@dataclass
class SynthConfig:
    """Parameters of the synthetic multi-speaker session generator."""

    num_speakers: int = 4
    feature_dim: int = 24
    cluster_separation: float = 10.0
    turn_duration_range_s: tuple[float, float] = (1.5, 4.0)
    session_duration_s: float = 240.0
    overlap_fraction: float = 0.0
    frame_shift_s: float = 0.010
    rng_seed: int = 0

    def validate(self):
        if self.num_speakers < 2:
            raise ConfigError("num_speakers must be >= 2")
        if self.feature_dim < self.num_speakers:
            raise ConfigError(
                "feature_dim must be >= num_speakers (cluster means span a simplex)"
            )
        if self.cluster_separation <= 0:
            raise ConfigError("cluster_separation must be positive")
        lo, hi = self.turn_duration_range_s
        if lo <= 0 or hi < lo:
            raise ConfigError("turn_duration_range_s must satisfy 0 < min <= max")
        if not 0 <= self.overlap_fraction < 1:
            raise ConfigError("overlap_fraction must be in [0, 1)")
        if self.session_duration_s < hi:
            raise ConfigError("session_duration_s must exceed the longest turn")
        if self.frame_shift_s <= 0:
            raise ConfigError("frame_shift_s must be positive")


def speaker_means(num_speakers: int, feature_dim: int, separation: float) -> np.ndarray:
    """Cluster means with pairwise Euclidean distance exactly ``separation``.

    Scaled standard-basis vectors form a regular simplex (edge length
    ``a * sqrt(2)`` for scale ``a``); the vertex centroid is subtracted so
    features are centered.  Deterministic: no randomness involved, so every
    session built from the same catalog shares identical cluster means.
    """
    scale = separation / math.sqrt(2.0)
    means = np.zeros((num_speakers, feature_dim))
    means[np.arange(num_speakers), np.arange(num_speakers)] = scale
    return means - means.mean(axis=0, keepdims=True)


def speaker_name(index: int) -> str:
    return f"spk{index:02d}"


def generate_session(cfg: SynthConfig) -> tuple[FeatureSequence, SegmentLabels]:
    """Synthesize one multi-speaker session (features plus reference labels).

    Turns alternate between randomly chosen distinct speakers; with
    ``overlap_fraction > 0`` each turn boundary acquires a cross-talk region
    in which both speakers are active.  Identical configs (including
    ``rng_seed``) produce bit-identical output.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    means = speaker_means(cfg.num_speakers, cfg.feature_dim, cfg.cluster_separation)

    lo, hi = cfg.turn_duration_range_s
    total = cfg.session_duration_s

    # Lay out turns; draw one duration ahead so overlaps can be bounded by
    # the shorter of the two adjacent turns.
    segments: list[Segment] = []
    speaker = int(rng.integers(cfg.num_speakers))
    start = 0.0
    duration = float(rng.uniform(lo, hi))
    while start < total:
        end = min(start + duration, total)
        next_speaker = int(rng.integers(cfg.num_speakers - 1))
        if next_speaker >= speaker:
            next_speaker += 1
        next_duration = float(rng.uniform(lo, hi))
        overlap = cfg.overlap_fraction * float(rng.uniform(0.25, 0.75)) * min(
            duration, next_duration
        )
        if end >= total:
            segments.append(Segment(start, total, speaker_name(speaker)))
            break
        segments.append(Segment(start, end, speaker_name(speaker)))
        start = end - overlap
        speaker = next_speaker
        duration = next_duration
    labels = SegmentLabels(segments)

    num_frames = int(round(total / cfg.frame_shift_s))
    frames = rng.standard_normal((num_frames, cfg.feature_dim))
    centers = (np.arange(num_frames) + 0.5) * cfg.frame_shift_s
    name_to_idx = {speaker_name(i): i for i in range(cfg.num_speakers)}
    for seg_list, t0, t1 in _constant_active_runs(labels, 0.0, total):
        idx = [name_to_idx[s] for s in seg_list]
        a = int(np.searchsorted(centers, t0))
        b = int(np.searchsorted(centers, t1))
        if idx and b > a:
            frames[a:b] += means[idx].mean(axis=0)

    features = FeatureSequence(
        frames, frame_shift_s=cfg.frame_shift_s, source_id=f"synth-{cfg.rng_seed}"
    )
    return features, labels


def _constant_active_runs(labels, start_s, end_s):
    """Yield (sorted active speakers, run start, run end) over [start_s, end_s)."""
    events = {start_s, end_s}
    for seg in labels.segments:
        if seg.end_s > start_s and seg.start_s < end_s:
            events.add(min(max(seg.start_s, start_s), end_s))
            events.add(min(max(seg.end_s, start_s), end_s))
    points = sorted(events)
    runs = []
    for t0, t1 in zip(points, points[1:]):
        if t1 <= t0:
            continue
        mid = 0.5 * (t0 + t1)
        active = sorted(labels.active_at(mid))
        runs.append((active, t0, t1))
    return runs


def active_set_sweep(labels, start_s, end_s):
    """Sweep [start_s, end_s) and segment it wherever the active set changes.

    Returns ``(change_times, active_sets)`` where ``active_sets`` has one
    entry per swept segment (consecutive equal sets are merged, so there is
    always exactly one more set than change times).
    """
    if end_s <= start_s:
        raise ValueError("sweep window must have positive length")
    merged_sets: list[frozenset[str]] = []
    change_times: list[float] = []
    for active, t0, _t1 in _constant_active_runs(labels, start_s, end_s):
        current = frozenset(active)
        if merged_sets and current == merged_sets[-1]:
            continue
        if merged_sets:
            change_times.append(t0)
        merged_sets.append(current)
    return change_times, merged_sets


def sample_training_window(
    features: FeatureSequence,
    labels: SegmentLabels,
    window_s: float,
    rng: np.random.Generator,
    catalog: tuple[str, ...] | None = None,
) -> TrainingExample:
    """Cut a uniform-random window and derive its identity sequence.

    A new target segment begins whenever the set of active speakers changes
    (overlap onsets/offsets included); truncated boundary segments still
    contribute their speakers.  Raises ``ValueError`` for windows longer
    than the session or windows covering unannotated time.
    """
    shift = features.frame_shift_s
    session_s = features.duration_s
    if window_s > session_s:
        raise ValueError("window_s exceeds session duration")
    num_window_frames = int(round(window_s / shift))
    if num_window_frames < 1:
        raise ValueError("window_s shorter than one frame")

    max_start_frame = features.num_frames - num_window_frames
    start_frame = int(rng.integers(0, max_start_frame + 1))
    win_start = start_frame * shift
    win_end = (start_frame + num_window_frames) * shift

    change_times, active_sets = active_set_sweep(labels, win_start, win_end)
    if any(len(s) == 0 for s in active_sets):
        raise ValueError("window covers unannotated time")

    if catalog is None:
        catalog = tuple(labels.speakers())
    index = {name: i for i, name in enumerate(catalog)}
    targets = np.zeros((len(active_sets), len(catalog)))
    for u, active in enumerate(active_sets):
        for name in active:
            if name not in index:
                raise ValueError(f"speaker {name!r} missing from catalog")
            targets[u, index[name]] = 1.0

    window = FeatureSequence(
        features.frames[start_frame : start_frame + num_window_frames].copy(),
        frame_shift_s=shift,
        source_id=f"{features.source_id}[{win_start:.2f}:{win_end:.2f}]",
    )
    return TrainingExample(
        features=window,
        identity_sequence=SpeakerIdentitySequence(targets, catalog),
        change_times_s=[t - win_start for t in change_times],
    )


def add_noise(
    features: FeatureSequence,
    snr_db_range: tuple[float, float],
    rng: np.random.Generator,
    return_noise: bool = False,
):
    """Additive Gaussian corruption at an SNR drawn uniformly from the range.

    The noise realization is rescaled so its empirical power hits the drawn
    SNR exactly (``10*log10(signal_power/noise_power) == snr``), with signal
    power measured over the whole window.
    """
    lo, hi = snr_db_range
    if not (0 <= lo <= hi <= 60):
        raise ValueError("snr_db_range must satisfy 0 <= min <= max <= 60")
    if features.num_frames < 1:
        raise ValueError("empty feature sequence")

    snr_db = float(rng.uniform(lo, hi))
    signal_power = float(np.mean(features.frames**2))
    if signal_power == 0.0:
        raise ValueError("zero-power features: SNR is undefined")
    noise = rng.standard_normal(features.frames.shape)
    target_power = signal_power / 10.0 ** (snr_db / 10.0)
    noise *= math.sqrt(target_power / float(np.mean(noise**2)))
    noisy = FeatureSequence(
        features.frames + noise,
        frame_shift_s=features.frame_shift_s,
        source_id=features.source_id,
    )
    if return_noise:
        return noisy, noise, snr_db
    return noisy


def store_features(path, features: FeatureSequence):
    """Write the plain-text feature format (exact float64 round trip)."""
    with open(path, "w") as fh:
        fh.write(
            f"{features.num_frames} {features.feature_dim} "
            f"{float(features.frame_shift_s)!r} {features.source_id or '-'}\n"
        )
        # repr of a python float round-trips the exact double
        for row in features.frames:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_features(path) -> FeatureSequence:
    """Parse a feature file, reporting malformed content with line numbers."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(path, 1, "missing header line")
    head = lines[0].split()
    if len(head) != 4:
        raise ParseError(path, 1, "header must be 'T F frame_shift_s source_id'")
    try:
        num_frames, feature_dim = int(head[0]), int(head[1])
        frame_shift = float(head[2])
    except ValueError:
        raise ParseError(path, 1, f"unparseable header fields {head[:3]}") from None
    source_id = head[3] if head[3] != "-" else ""
    if num_frames < 1 or feature_dim < 1 or frame_shift <= 0:
        raise ParseError(path, 1, "header declares a degenerate matrix")
    if len(lines) - 1 != num_frames:
        raise ParseError(path, len(lines), f"expected {num_frames} data rows, found {len(lines) - 1}")

    frames = np.empty((num_frames, feature_dim))
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != feature_dim:
            raise ParseError(path, i, f"expected {feature_dim} values, found {len(parts)}")
        try:
            row = [float(p) for p in parts]
        except ValueError:
            raise ParseError(path, i, "unparseable value") from None
        if not all(math.isfinite(v) for v in row):
            raise ParseError(path, i, "non-finite value")
        frames[i - 2] = row
    return FeatureSequence(frames, frame_shift_s=frame_shift, source_id=source_id)


def store_labels(path, labels: SegmentLabels):
    with open(path, "w") as fh:
        for seg in labels.segments:
            fh.write(f"{seg.speaker} {seg.start_s:.6f} {seg.end_s:.6f}\n")


def load_labels(path) -> SegmentLabels:
    """Parse the minimal 'speaker start_s end_s' annotation format."""
    segments = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(path, i, "expected 'speaker start_s end_s'")
            try:
                start_s, end_s = float(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError(path, i, "unparseable time") from None
            if not (math.isfinite(start_s) and math.isfinite(end_s)):
                raise ParseError(path, i, "non-finite time")
            if end_s <= start_s:
                raise ParseError(path, i, f"empty segment: end {end_s} <= start {start_s}")
            segments.append(Segment(start_s, end_s, parts[0]))
    if not segments:
        raise ParseError(path, 1, "label file contains no segments")
    return SegmentLabels(segments)
