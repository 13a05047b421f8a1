"""Teacher-forcing training loop with early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataFormatError, NumericError
from . import autodiff as ad
from .captioner import CaptionModel

log = logging.getLogger(__name__)


@dataclass
class TrainLog:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_losses)


def evaluate_loss(model: CaptionModel, samples) -> float:
    """Mean teacher-forcing loss without dropout or graph building."""
    total = 0.0
    with ad.no_grad():
        for s in samples:
            total += model.teacher_loss(s, training=False).item()
    return total / len(samples)


def train_model(model: CaptionModel, train_samples, val_samples=None,
                stop_train_loss: float | None = None) -> TrainLog:
    """Adam training with gradient value clipping and early stopping.

    Validation loss (on ``val_samples``, or the training set when absent)
    drives early stopping with the configured patience; the best snapshot
    is restored before returning. ``stop_train_loss`` ends training as soon
    as the epoch's mean training loss drops below it.
    """
    config = model.config
    train_samples = list(train_samples)
    if not train_samples:
        raise DataFormatError("empty training set")
    monitor = list(val_samples) if val_samples else train_samples

    params = [t for _, t in model.parameters()]
    optimizer = ad.Adam(params, lr=config.lr, clip=config.grad_clip)
    shuffle_rng = np.random.default_rng([config.seed, 2])
    track = TrainLog()
    best_state = None
    stale = 0
    hit_target = False
    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(train_samples))
        total = 0.0
        for i in order:
            optimizer.zero_grad()
            loss = model.teacher_loss(train_samples[int(i)], training=True)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += value
        train_loss = total / len(train_samples)
        val_loss = evaluate_loss(model, monitor)
        track.train_losses.append(train_loss)
        track.val_losses.append(val_loss)
        if val_loss < track.best_val_loss:
            track.best_val_loss = val_loss
            track.best_epoch = epoch
            best_state = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
        if epoch % 25 == 0 or stale == 0:
            log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if stop_train_loss is not None and train_loss < stop_train_loss:
            hit_target = True
            break
        if stale > config.early_stop_patience:
            track.stopped_early = True
            break
    # keep the weights that met the explicit loss target, otherwise the
    # snapshot with the best monitored loss
    if best_state is not None and not hit_target:
        for p, data in zip(params, best_state):
            p.data[...] = data
    return track
