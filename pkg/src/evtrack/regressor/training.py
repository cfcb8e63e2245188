"""Mini-batch training loop with a deterministic shuffle and CSV log."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from evtrack.regressor.data import TrainingPair, stack_pairs
from evtrack.regressor.model import MotionRegressor, TrainConfig, mse_loss


@dataclass
class TrainingLog:
    """Per-step records plus epoch-level validation losses."""

    steps: List[Tuple[int, float, float]] = field(default_factory=list)
    epoch_val: List[Tuple[int, float]] = field(default_factory=list)
    initial_train_loss: float = float("nan")
    final_train_loss: float = float("nan")

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_norm"])
            for step, loss, grad_norm in self.steps:
                writer.writerow([step, repr(loss), repr(grad_norm)])


def evaluate_loss(
    model: MotionRegressor,
    patches: np.ndarray,
    targets: np.ndarray,
    batch_size: int = 32,
) -> float:
    """Eval-mode MSE over a full set, batched to bound memory."""
    n = patches.shape[0]
    total = 0.0
    for start in range(0, n, batch_size):
        stop = min(n, start + batch_size)
        preds = model.forward_batch(patches[start:stop], train=False)
        diff = preds - targets[start:stop]
        total += float(np.sum(diff * diff))
    return total / n


def train_model(
    model: MotionRegressor,
    train_pairs: Sequence[TrainingPair],
    tc: TrainConfig,
    val_pairs: Optional[Sequence[TrainingPair]] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> TrainingLog:
    """Train for tc.epochs epochs; returns the step/validation log.

    The sample order comes from a generator seeded by tc.seed only, so a
    rerun with the same config and data reproduces every step bit-exactly.
    """
    patches, targets = stack_pairs(train_pairs)
    val_stack = stack_pairs(val_pairs) if val_pairs else None
    shuffle_rng = np.random.default_rng([tc.seed, 0x7121])

    log = TrainingLog()
    log.initial_train_loss = evaluate_loss(model, patches, targets)

    n = patches.shape[0]
    step = 0
    last_train_loss = log.initial_train_loss
    for epoch in range(tc.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, tc.batch_size):
            batch_idx = order[start : start + tc.batch_size]
            loss = model.backward_and_step(
                patches[batch_idx], targets[batch_idx], tc
            )
            step += 1
            log.steps.append((step, float(loss), model.grad_global_norm()))
            last_train_loss = float(loss)
        if val_stack is not None:
            log.epoch_val.append(
                (epoch, evaluate_loss(model, val_stack[0], val_stack[1]))
            )
    log.final_train_loss = evaluate_loss(model, patches, targets)
    if log_path is not None:
        log.write_csv(log_path)
    return log
