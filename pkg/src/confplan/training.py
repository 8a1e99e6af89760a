"""Fine-tuning loop and loss functions.

Three objectives are supported:
  * "cofinellm": cross-entropy plus a gated conformal regularizer that
    penalizes the strongest rival action's mass above the threshold, but only
    on examples where the correct action itself clears the threshold
    (non-singleton sets that already contain the truth);
  * "ua": cross-entropy only (the conformal weight is forced to zero);
  * "conftr": a soft set-membership objective penalizing missed truth and
    set size jointly.

The threshold used by the regularizers is recalibrated from a held-out
calibration split every `refresh_period` epochs and is treated as a constant
with respect to the parameters in all gradients. Training data is introduced
family by family on a phase schedule, retaining a fixed subset of earlier
families to avoid forgetting.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import conformal, policy
from .encoding import DatasetEntry, StepRecord
from .gridworld import FAMILIES

METHODS = ("cofinellm", "ua", "conftr")
GATES = ("hard", "sigmoid")

LOG_GUARD = 1e-12


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or invalid configuration)."""


@dataclass
class LossConfig:
    method: str = "cofinellm"
    cp_weight: float = 0.1
    gate: str = "hard"
    gate_temperature: float = 50.0
    alpha: float = 0.05
    conftr_sharpness: float = 0.1
    conftr_size_weight: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.gate not in GATES:
            raise ValueError(f"unknown gate {self.gate!r}")
        if self.cp_weight < 0:
            raise ValueError("cp_weight must be >= 0")
        if self.gate == "sigmoid" and self.gate_temperature <= 0:
            raise ValueError("gate_temperature must be > 0")
        if self.conftr_sharpness <= 0:
            raise ValueError("conftr_sharpness must be > 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")


@dataclass
class CurriculumSchedule:
    phase_start_epochs: tuple = (1, 6, 11, 21)
    retained_per_phase: tuple = (100, 100, 500, 1000)
    family_order: tuple = FAMILIES

    def __post_init__(self):
        self.phase_start_epochs = tuple(self.phase_start_epochs)
        self.retained_per_phase = tuple(self.retained_per_phase)
        self.family_order = tuple(self.family_order)
        if list(self.phase_start_epochs) != sorted(set(self.phase_start_epochs)):
            raise ValueError("phase_start_epochs must be strictly increasing")
        if any(r <= 0 for r in self.retained_per_phase):
            raise ValueError("retained_per_phase entries must be positive")
        if len(self.phase_start_epochs) != len(self.family_order):
            raise ValueError("one phase per family required")


@dataclass
class TrainConfig:
    refresh_period: int = 10            # epochs between threshold recalibrations
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 1e-3
    hidden: tuple = (256, 256)
    early_stop_patience: int = 10
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)

    def __post_init__(self):
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.hidden = tuple(self.hidden)
        if isinstance(self.curriculum, dict):
            self.curriculum = CurriculumSchedule(**self.curriculum)


@dataclass
class TrainState:
    params: policy.PolicyParams
    opt_state: policy.OptimizerState
    threshold: Optional[conformal.Threshold]
    epoch: int
    loss_history: list
    threshold_history: list  # [(epoch, Threshold)], same object within a refresh window


# ---------------------------------------------------------------------------
# Losses (all return (scalar, gradient w.r.t. logits))
# ---------------------------------------------------------------------------

def _softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pullback of a probability-space gradient through the softmax."""
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def _check_batch(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("batch of confidences must be a non-empty 2-D array")
    if y.shape != (p.shape[0],):
        raise ValueError("labels must be one index per batch row")
    return p, y


def ce_loss(batch_confidences: np.ndarray, batch_correct_actions) -> tuple[float, np.ndarray]:
    """Mean negative log-confidence in the correct action."""
    p, y = _check_batch(batch_confidences, batch_correct_actions)
    n = p.shape[0]
    rows = np.arange(n)
    p_y = np.maximum(p[rows, y], LOG_GUARD)
    loss = float(-np.log(p_y).mean())
    dlogits = p.copy()
    dlogits[rows, y] -= 1.0
    return loss, dlogits / n


def _rival_max(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Largest confidence among non-correct actions and its (first) index."""
    masked = p.copy()
    masked[np.arange(p.shape[0]), y] = -np.inf
    j = masked.argmax(axis=1)
    return masked[np.arange(p.shape[0]), j], j


def cp_loss(
    batch_confidences: np.ndarray,
    batch_correct_actions,
    threshold: conformal.Threshold,
    gate: str = "hard",
    gate_temperature: float = 50.0,
) -> tuple[float, np.ndarray]:
    """Gated rival-mass penalty: mean of psi(p_y, delta) * relu(p_max - delta).

    With the hard gate, psi = 1(p_y >= delta) is a constant per-example weight
    and gradient flows only through the rival confidence where the gate is open
    and the rival exceeds the threshold. With the sigmoid gate the weight
    sigma(T (p_y - delta)) is differentiated as well. The threshold is a
    constant with respect to the parameters.
    """
    p, y = _check_batch(batch_confidences, batch_correct_actions)
    n = p.shape[0]
    rows = np.arange(n)
    delta = threshold.delta
    p_y = p[rows, y]
    p_max, j = _rival_max(p, y)
    gap = p_max - delta
    relu = np.maximum(gap, 0.0)

    dprobs = np.zeros_like(p)
    if gate == "hard":
        psi = (p_y >= delta).astype(np.float64)
        dpsi = np.zeros(n)
    elif gate == "sigmoid":
        z = gate_temperature * (p_y - delta)
        psi = 1.0 / (1.0 + np.exp(-z))
        dpsi = psi * (1.0 - psi) * gate_temperature
    else:
        raise ValueError(f"unknown gate {gate!r}")

    loss = float((psi * relu).mean())
    active = (gap > 0.0).astype(np.float64)
    dprobs[rows, j] += psi * active / n
    dprobs[rows, y] += dpsi * relu / n
    return loss, _softmax_vjp(p, dprobs)


def combined_loss(
    batch_confidences: np.ndarray,
    batch_correct_actions,
    threshold: Optional[conformal.Threshold],
    loss_config: LossConfig,
) -> tuple[float, np.ndarray]:
    """Cross-entropy plus weighted conformal penalty; "ua" is weight zero exactly."""
    if loss_config.method not in ("cofinellm", "ua"):
        raise ValueError(f"combined_loss does not apply to method {loss_config.method!r}")
    weight = 0.0 if loss_config.method == "ua" else loss_config.cp_weight
    ce, dce = ce_loss(batch_confidences, batch_correct_actions)
    if weight == 0.0:
        return ce, dce
    cp, dcp = cp_loss(
        batch_confidences,
        batch_correct_actions,
        threshold,
        gate=loss_config.gate,
        gate_temperature=loss_config.gate_temperature,
    )
    return ce + weight * cp, dce + weight * dcp


def conftr_loss(
    batch_confidences: np.ndarray,
    batch_correct_actions,
    threshold: conformal.Threshold,
    sharpness: float = 0.1,
    size_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Soft set-membership objective.

    Per example: C_k = sigma((p_k - delta) / sharpness); the loss is
    log((1 - C_y) + sum_{k != y} C_k + size_weight * relu(sum_k C_k - 1)),
    averaged over the batch. Fully differentiated; the log argument is guarded
    below by 1e-12.
    """
    p, y = _check_batch(batch_confidences, batch_correct_actions)
    n = p.shape[0]
    rows = np.arange(n)
    delta = threshold.delta
    c = 1.0 / (1.0 + np.exp(-(p - delta) / sharpness))
    c_y = c[rows, y]
    total = c.sum(axis=1)
    rivals = total - c_y
    size_excess = np.maximum(total - 1.0, 0.0)
    arg = (1.0 - c_y) + rivals + size_weight * size_excess
    arg_safe = np.maximum(arg, LOG_GUARD)
    loss = float(np.log(arg_safe).mean())

    # d(arg)/dC_k: +1 for rivals, -1 for the correct action, plus the size
    # penalty wherever the soft set size exceeds one.
    darg_dc = np.ones_like(p)
    darg_dc[rows, y] = -1.0
    darg_dc += size_weight * (total > 1.0).astype(np.float64)[:, None]
    dc_dp = c * (1.0 - c) / sharpness
    dprobs = (darg_dc * dc_dp) / (arg_safe[:, None] * n)
    return loss, _softmax_vjp(p, dprobs)


def batch_loss(
    batch_confidences: np.ndarray,
    batch_correct_actions,
    threshold: Optional[conformal.Threshold],
    loss_config: LossConfig,
) -> tuple[float, np.ndarray]:
    """Dispatch to the configured objective."""
    if loss_config.method == "conftr":
        return conftr_loss(
            batch_confidences,
            batch_correct_actions,
            threshold,
            sharpness=loss_config.conftr_sharpness,
            size_weight=loss_config.conftr_size_weight,
        )
    return combined_loss(batch_confidences, batch_correct_actions, threshold, loss_config)


# ---------------------------------------------------------------------------
# Curriculum
# ---------------------------------------------------------------------------

def curriculum_filter(
    dataset: Sequence[DatasetEntry],
    epoch: int,
    schedule: CurriculumSchedule,
    seed: int = 0,
) -> list[StepRecord]:
    """Active step-record pool for the given epoch.

    At phase p (the largest phase whose start epoch is <= epoch) the newest
    family contributes all of its scenarios while each earlier family
    contributes a fixed retained subset. The retained subsets depend only on
    (dataset, schedule, seed), so they are stable across epochs of a run.
    """
    phase = 0
    for i, start in enumerate(schedule.phase_start_epochs):
        if epoch >= start:
            phase = i
    by_family: dict[str, list[DatasetEntry]] = {f: [] for f in schedule.family_order}
    for entry in dataset:
        fam = entry.scenario.task.family
        if fam in by_family:
            by_family[fam].append(entry)

    pool: list[StepRecord] = []
    for i in range(phase + 1):
        fam = schedule.family_order[i]
        entries = by_family[fam]
        if i < phase:
            keep = min(schedule.retained_per_phase[i], len(entries))
            rng = random.Random(f"retain:{seed}:{fam}")
            entries = rng.sample(entries, keep)
        for e in entries:
            pool.extend(e.records)
    return pool


# ---------------------------------------------------------------------------
# Fine-tuning loop
# ---------------------------------------------------------------------------

def _mean_ce(params: policy.PolicyParams, records: Sequence[StepRecord], chunk: int = 2048) -> float:
    total = 0.0
    for start in range(0, len(records), chunk):
        batch = records[start : start + chunk]
        feats = np.stack([r.features for r in batch]).astype(np.float64)
        probs = policy.forward(params, feats)
        y = np.array([int(r.correct_action) for r in batch])
        p_y = np.maximum(probs[np.arange(len(batch)), y], LOG_GUARD)
        total += float(-np.log(p_y).sum())
    return total / len(records)


def finetune(
    initial_params: policy.PolicyParams,
    train_entries: Sequence[DatasetEntry],
    calib_entries: Sequence[DatasetEntry],
    loss_config: LossConfig,
    train_config: TrainConfig,
    val_entries: Optional[Sequence[DatasetEntry]] = None,
    run_dir=None,
) -> TrainState:
    """Minibatch training with periodic threshold refresh and optional early stop.

    The threshold is recalibrated at epoch 1 and every refresh_period epochs
    thereafter; between refreshes the loss sees the identical Threshold object.
    Early stopping monitors validation cross-entropy when a validation split is
    given (plateau patience from the config). Fully seeded and reproducible.
    """
    train_ids = {e.scenario.scenario_id for e in train_entries}
    calib_ids = {e.scenario.scenario_id for e in calib_entries}
    if train_ids & calib_ids:
        raise ValueError("train and calibration datasets must be disjoint by scenario")

    rng = np.random.default_rng(train_config.seed)
    params = initial_params
    opt_state = policy.adam_init(params, learning_rate=train_config.learning_rate)
    threshold: Optional[conformal.Threshold] = None
    loss_history: list[dict] = []
    threshold_history: list[tuple[int, conformal.Threshold]] = []

    metrics_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(run_dir / "metrics.jsonl", "w")

    val_records = [r for e in val_entries for r in e.records] if val_entries else None
    best_val = np.inf
    stale_epochs = 0
    epoch = 0
    try:
        for epoch in range(1, train_config.epochs + 1):
            if (epoch - 1) % train_config.refresh_period == 0:
                threshold = conformal.calibrate(params, calib_entries, loss_config.alpha)
                if run_dir is not None:
                    policy.save_checkpoint(
                        run_dir / f"ckpt_epoch_{epoch:03d}.npz",
                        params,
                        opt_state,
                        rng_state=rng.bit_generator.state,
                        meta={"epoch": epoch, "delta": threshold.delta},
                    )
            threshold_history.append((epoch, threshold))

            pool = curriculum_filter(
                train_entries, epoch, train_config.curriculum, seed=train_config.seed
            )
            order = rng.permutation(len(pool))
            epoch_losses = []
            for start in range(0, len(pool), train_config.batch_size):
                batch = [pool[i] for i in order[start : start + train_config.batch_size]]
                feats = np.stack([r.features for r in batch]).astype(np.float64)
                labels = np.array([int(r.correct_action) for r in batch])
                probs = policy.forward(params, feats)
                loss, dlogits = batch_loss(probs, labels, threshold, loss_config)
                if not np.isfinite(loss):
                    snapshot = {
                        "epoch": epoch,
                        "batch_start": int(start),
                        "loss": float(loss),
                        "delta": threshold.delta if threshold else None,
                        "param_norms": [float(np.abs(w).max()) for w in params.weights],
                    }
                    if run_dir is not None:
                        (run_dir / "abort_snapshot.json").write_text(json.dumps(snapshot, indent=2))
                    raise TrainingError(f"non-finite loss at epoch {epoch}: {snapshot}")
                grads = policy.backward(params, feats, dlogits)
                params, opt_state = policy.optimizer_step(params, grads, opt_state)
                epoch_losses.append(loss)

            val_ce = _mean_ce(params, val_records) if val_records else None
            record = {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)) if epoch_losses else None,
                "val_ce": val_ce,
                "delta": threshold.delta if threshold else None,
                "pool_size": len(pool),
                "n_batches": len(epoch_losses),
            }
            loss_history.append(record)
            if metrics_file is not None:
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()

            if val_ce is not None:
                if val_ce < best_val - 1e-6:
                    best_val = val_ce
                    stale_epochs = 0
                else:
                    stale_epochs += 1
                    if stale_epochs >= train_config.early_stop_patience:
                        break
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if run_dir is not None:
        policy.save_checkpoint(
            run_dir / "ckpt_final.npz",
            params,
            opt_state,
            rng_state=rng.bit_generator.state,
            meta={"epoch": epoch, "delta": threshold.delta if threshold else None},
        )
    return TrainState(
        params=params,
        opt_state=opt_state,
        threshold=threshold,
        epoch=epoch,
        loss_history=loss_history,
        threshold_history=threshold_history,
    )
