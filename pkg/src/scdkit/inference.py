"""Session-level inference and segmentation quality metrics.

A session is scored through overlapped sliding windows whose per-frame
change scores are averaged wherever windows overlap.  Change points are
the above-threshold local maxima of the averaged score track.  Quality is
measured as segmentation purity and coverage (duration-weighted interval
overlaps against the reference), summarized by their harmonic mean, with
the decision threshold tuned on a development set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import FeatureSequence, SegmentLabels, active_set_sweep
from .exceptions import ConfigError, MetricError
from .model import SCORE_SOURCES, FrameBaseline

DEFAULT_THETA_GRID = tuple(0.02 * k for k in range(1, 50))

# treat window boundaries within this of the session end as reaching it
TIME_EPS = 1e-9


@dataclass
class InferenceConfig:
    """Windowing and decision settings for session scoring."""

    window_s: float = 4.0
    overlap_frac: float = 0.8
    theta: float = 0.3
    score_source: str = "marks"

    def validate(self):
        if self.window_s <= 0:
            raise ConfigError("window_s must be positive")
        if not 0.0 <= self.overlap_frac < 1.0:
            raise ConfigError("overlap_frac must lie in [0, 1)")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        if self.score_source not in SCORE_SOURCES:
            raise ConfigError(f"score_source must be one of {SCORE_SOURCES}")


@dataclass
class ChangePointSet:
    """Hypothesized change times, strictly increasing, in seconds."""

    times_s: list[float]

    def __post_init__(self):
        for a, b in zip(self.times_s, self.times_s[1:]):
            if b <= a:
                raise ValueError("change times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times_s)


@dataclass
class MetricReport:
    """Purity, coverage and their harmonic mean, in percent."""

    purity: float
    coverage: float
    hn: float
    theta_used: float | None = None
    num_hypothesized_changes: int = 0
    num_reference_changes: int = 0

    def as_dict(self) -> dict:
        return {
            "purity": self.purity,
            "coverage": self.coverage,
            "hn": self.hn,
            "theta_used": self.theta_used,
            "num_hypothesized_changes": self.num_hypothesized_changes,
            "num_reference_changes": self.num_reference_changes,
        }


def sliding_windows(
    duration_s: float, window_s: float, overlap_frac: float
) -> list[tuple[float, float]]:
    """Regularly stepped windows plus a final one ending at the session end.

    The step is ``window_s * (1 - overlap_frac)``.  A window longer than
    the session degenerates to a single full-session window.
    """
    if duration_s <= 0 or window_s <= 0:
        raise ValueError("duration_s and window_s must be positive")
    if not 0.0 <= overlap_frac < 1.0:
        raise ValueError("overlap_frac must lie in [0, 1)")
    if window_s >= duration_s:
        return [(0.0, duration_s)]
    step = window_s * (1.0 - overlap_frac)
    windows = []
    start = 0.0
    k = 0
    while start + window_s <= duration_s + TIME_EPS:
        windows.append((start, start + window_s))
        k += 1
        start = k * step
    if windows[-1][1] < duration_s - TIME_EPS:
        windows.append((duration_s - window_s, duration_s))
    return windows


def score_session(
    model, features: FeatureSequence, cfg: InferenceConfig
) -> np.ndarray:
    """Average the per-window change scores into one track of length T."""
    cfg.validate()
    feature_dim = model.encoder.cfg.feature_dim
    if features.feature_dim != feature_dim:
        raise ConfigError(
            f"feature dim {features.feature_dim} does not match the model's "
            f"{feature_dim}"
        )
    num_frames = features.num_frames
    shift = features.frame_shift_s
    sums = np.zeros(num_frames)
    counts = np.zeros(num_frames)
    for start_s, end_s in sliding_windows(
        features.duration_s, cfg.window_s, cfg.overlap_frac
    ):
        a = max(0, int(round(start_s / shift)))
        b = min(num_frames, int(round(end_s / shift)))
        x = torch.as_tensor(features.frames[a:b], dtype=torch.float64)
        if isinstance(model, FrameBaseline):
            window_scores = model.window_frame_scores(x)
        else:
            window_scores = model.window_frame_scores(x, cfg.score_source)
        sums[a:b] += window_scores
        counts[a:b] += 1.0
    if counts.min() < 1:
        raise ConfigError("sliding windows left some frames uncovered")
    return sums / counts


def peak_pick(scores, theta: float, frame_shift_s: float = 0.010) -> ChangePointSet:
    """Above-threshold local maxima; a flat plateau emits its center index.

    A peak at index ``i`` marks the boundary instant after frame ``i``,
    i.e. time ``(i + 1) * frame_shift_s``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("scores must be a vector")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    times = []
    n = scores.shape[0]
    i = 0
    while i < n:
        value = scores[i]
        if value <= theta:
            i += 1
            continue
        j = i
        while j + 1 < n and scores[j + 1] == value:
            j += 1
        left_ok = i == 0 or scores[i - 1] < value
        right_ok = j == n - 1 or scores[j + 1] < value
        # the boundary after the final frame is the end of the sequence,
        # not a change point
        if left_ok and right_ok and (center := (i + j) // 2) < n - 1:
            times.append((center + 1) * frame_shift_s)
        i = j + 1
    return ChangePointSet(times)


def _merge_intervals(intervals):
    merged = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return merged


def _overlap(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def overlap_sums(
    reference: SegmentLabels,
    hypothesis: ChangePointSet,
    span_s: tuple[float, float],
) -> tuple[float, float, float, float]:
    """Duration numerators/denominators behind coverage and purity.

    Returns ``(coverage_num, coverage_den, purity_num, purity_den)`` so
    multi-session aggregates can sum them before dividing.
    """
    start_s, end_s = span_s
    if end_s <= start_s:
        raise MetricError("session span must have positive length")
    refs = [
        (max(seg.start_s, start_s), min(seg.end_s, end_s), seg.speaker)
        for seg in reference.segments
        if seg.end_s > start_s and seg.start_s < end_s
    ]
    if not refs:
        raise MetricError("reference has no segments inside the span")
    for t in hypothesis.times_s:
        if not start_s < t < end_s:
            raise MetricError(f"hypothesized change {t} outside the span")

    cuts = [start_s, *hypothesis.times_s, end_s]
    hyps = list(zip(cuts, cuts[1:]))
    annotated = _merge_intervals([(a, b) for a, b, _ in refs])

    coverage_num = sum(
        max(_overlap(r0, r1, h0, h1) for h0, h1 in hyps) for r0, r1, _ in refs
    )
    coverage_den = sum(r1 - r0 for r0, r1, _ in refs)
    purity_num = 0.0
    purity_den = 0.0
    for h0, h1 in hyps:
        purity_num += max(_overlap(r0, r1, h0, h1) for r0, r1, _ in refs)
        purity_den += sum(_overlap(a0, a1, h0, h1) for a0, a1 in annotated)
    return coverage_num, coverage_den, purity_num, purity_den


def _report_from_sums(sums, theta=None, num_hyp=0, num_ref=0) -> MetricReport:
    cov_num, cov_den, pur_num, pur_den = sums
    coverage = 100.0 * cov_num / cov_den if cov_den > 0 else 0.0
    purity = 100.0 * pur_num / pur_den if pur_den > 0 else 0.0
    hn = 2.0 * purity * coverage / (purity + coverage) if purity + coverage > 0 else 0.0
    return MetricReport(
        purity=purity,
        coverage=coverage,
        hn=hn,
        theta_used=theta,
        num_hypothesized_changes=num_hyp,
        num_reference_changes=num_ref,
    )


def purity_coverage(
    reference: SegmentLabels,
    hypothesis: ChangePointSet,
    span_s: tuple[float, float],
    theta: float | None = None,
) -> MetricReport:
    """Segmentation purity/coverage of one hypothesis against one reference."""
    sums = overlap_sums(reference, hypothesis, span_s)
    num_ref = len(active_set_sweep(reference, span_s[0], span_s[1])[0])
    return _report_from_sums(sums, theta, len(hypothesis), num_ref)


def evaluate_sessions(
    model,
    sessions: list[tuple[str, FeatureSequence, SegmentLabels]],
    cfg: InferenceConfig,
    theta: float | None = None,
):
    """Score and evaluate each session; aggregate by summing durations.

    Returns ``(aggregate_report, per_session)`` where ``per_session`` is a
    list of ``(session_id, MetricReport, ChangePointSet)``.
    """
    cfg.validate()
    if not sessions:
        raise ValueError("need at least one session")
    theta = cfg.theta if theta is None else theta
    totals = np.zeros(4)
    per_session = []
    total_hyp = 0
    total_ref = 0
    for session_id, features, labels in sessions:
        scores = score_session(model, features, cfg)
        hypothesis = peak_pick(scores, theta, features.frame_shift_s)
        span = (0.0, features.duration_s)
        sums = overlap_sums(labels, hypothesis, span)
        totals += np.asarray(sums)
        num_ref = len(active_set_sweep(labels, 0.0, features.duration_s)[0])
        total_hyp += len(hypothesis)
        total_ref += num_ref
        per_session.append(
            (session_id, _report_from_sums(sums, theta, len(hypothesis), num_ref),
             hypothesis)
        )
    aggregate = _report_from_sums(tuple(totals), theta, total_hyp, total_ref)
    return aggregate, per_session


def tune_threshold(
    model,
    dev_sessions: list[tuple[str, FeatureSequence, SegmentLabels]],
    cfg: InferenceConfig,
    grid=DEFAULT_THETA_GRID,
) -> tuple[float, MetricReport]:
    """Pick the grid threshold maximizing aggregate Hn; ties go upward.

    Session scores are computed once; only the peak picking and the
    overlap sums are repeated per candidate threshold.
    """
    cfg.validate()
    if not grid:
        raise ValueError("threshold grid must be nonempty")
    if not dev_sessions:
        raise ValueError("need at least one development session")
    scored = []
    for session_id, features, labels in dev_sessions:
        scores = score_session(model, features, cfg)
        scored.append((session_id, features, labels, scores))

    best_theta = None
    best_report = None
    for theta in sorted(grid):
        totals = np.zeros(4)
        total_hyp = 0
        total_ref = 0
        for _, features, labels, scores in scored:
            hypothesis = peak_pick(scores, theta, features.frame_shift_s)
            totals += np.asarray(
                overlap_sums(labels, hypothesis, (0.0, features.duration_s))
            )
            total_hyp += len(hypothesis)
            total_ref += len(active_set_sweep(labels, 0.0, features.duration_s)[0])
        report = _report_from_sums(tuple(totals), theta, total_hyp, total_ref)
        if best_report is None or report.hn >= best_report.hn:
            best_theta = theta
            best_report = report
    return best_theta, best_report


def write_results(path, aggregate: MetricReport, per_session):
    """Persist the evaluation as structured text, one record per session."""
    payload = {
        "aggregate": aggregate.as_dict(),
        "sessions": [
            {
                "session_id": session_id,
                "theta": report.theta_used,
                "purity": report.purity,
                "coverage": report.coverage,
                "hn": report.hn,
                "change_times_s": list(hypothesis.times_s),
            }
            for session_id, report, hypothesis in per_session
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
    return payload
