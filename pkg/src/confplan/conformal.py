"""Split-conformal machinery: trajectory nonconformity scores, finite-sample
quantile calibration, and per-step prediction sets.

A mission's nonconformity score is one minus the smallest confidence the
policy assigns to the correct action across the mission's steps, i.e. its
worst-case per-step error. Calibrating the (1 - alpha) split-conformal
quantile of these scores yields a confidence threshold delta; at test time
every action scoring at least delta enters the prediction set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .gridworld import Action
from . import policy as policy_mod

N_ACTIONS = len(Action)


class CalibrationError(ValueError):
    """Raised when calibration inputs are unusable (e.g. an empty score list)."""


@dataclass(frozen=True)
class NonconformityScore:
    value: float
    scenario_id: str = ""


@dataclass(frozen=True)
class Threshold:
    delta: float
    alpha: float
    calib_size: int
    quantile_value: float


@dataclass(frozen=True)
class PredictionSet:
    actions: tuple  # tuple[Action, ...], ascending by index
    step_index: int

    def __len__(self) -> int:
        return len(self.actions)

    def __contains__(self, action) -> bool:
        return Action(action) in self.actions


def trajectory_ncs(
    per_step_confidences_in_correct_action: Sequence[float], scenario_id: str = ""
) -> NonconformityScore:
    """1 - min over the mission's steps of the confidence in the correct action."""
    seq = list(per_step_confidences_in_correct_action)
    if not seq:
        raise ValueError("per-step confidence sequence must be non-empty")
    lo = min(seq)
    hi = max(seq)
    if lo < 0.0 or hi > 1.0:
        raise ValueError("confidences must lie in [0, 1]")
    return NonconformityScore(value=1.0 - lo, scenario_id=scenario_id)


def quantile_index(n_scores: int, alpha: float) -> int:
    """1-based order-statistic index ceil((D+1)(1-alpha)), computed exactly.

    Exact decimal arithmetic avoids float-ceiling artifacts at integer
    boundaries such as (19+1) * 0.95.
    """
    coverage = Fraction(1) - Fraction(str(alpha))
    return math.ceil(Fraction(n_scores + 1) * coverage)


def conformal_threshold(scores: Sequence, alpha: float) -> Threshold:
    """Finite-sample calibrated threshold; conservative (q_hat = 1) when the
    quantile index exceeds the calibration size."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    values = [s.value if isinstance(s, NonconformityScore) else float(s) for s in scores]
    if not values:
        raise CalibrationError("empty calibration score list")
    n = len(values)
    k = quantile_index(n, alpha)
    if k > n:
        q_hat = 1.0
    else:
        q_hat = float(np.sort(np.asarray(values, dtype=np.float64))[k - 1])
    return Threshold(delta=1.0 - q_hat, alpha=alpha, calib_size=n, quantile_value=q_hat)


def prediction_set(confidences: np.ndarray, threshold: Threshold, t: int) -> PredictionSet:
    """All actions whose confidence is >= delta (closed threshold); may be empty."""
    probs = np.asarray(confidences, dtype=np.float64)
    if probs.shape != (N_ACTIONS,):
        raise ValueError(f"expected {N_ACTIONS} confidences, got shape {probs.shape}")
    actions = tuple(Action(int(i)) for i in np.flatnonzero(probs >= threshold.delta))
    return PredictionSet(actions=actions, step_index=t)


def scenario_scores(params, entries: Iterable, batch_size: int = 1024) -> list[NonconformityScore]:
    """Per-scenario nonconformity scores from teacher-forced step records."""
    entries = list(entries)
    records = [r for e in entries for r in e.records]
    if not records:
        raise CalibrationError("calibration dataset has no step records")
    correct = np.empty(len(records), dtype=np.float64)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        feats = np.stack([r.features for r in chunk]).astype(np.float64)
        probs = policy_mod.forward(params, feats)
        idx = np.array([int(r.correct_action) for r in chunk])
        correct[start : start + len(chunk)] = probs[np.arange(len(chunk)), idx]

    scores = []
    offset = 0
    for e in entries:
        h = len(e.records)
        scores.append(
            trajectory_ncs(correct[offset : offset + h].tolist(), scenario_id=e.scenario.scenario_id)
        )
        offset += h
    return scores


def calibrate(params, calib_entries: Iterable, alpha: float) -> Threshold:
    """Composes forward -> trajectory scores -> conformal quantile."""
    return conformal_threshold(scenario_scores(params, calib_entries), alpha)


def calibration_report(threshold: Threshold, scores: Sequence[NonconformityScore], bins: int = 20) -> dict:
    values = np.array([s.value for s in scores], dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return {
        "v": 1,
        "alpha": threshold.alpha,
        "calib_size": threshold.calib_size,
        "q_hat": threshold.quantile_value,
        "delta": threshold.delta,
        "score_histogram": {
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
    }
