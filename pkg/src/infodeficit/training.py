"""Minibatch Adam loop shared by both tasks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core_math import AdamState, Tape, Tensor, adam_step
from .model import Ablation, ModelParams

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    context: int = 3
    chronological: bool = False
    balance_candidates: bool = False
    ablation: Ablation = field(default_factory=Ablation)

    def adam(self) -> AdamState:
        return AdamState(self.alpha, self.beta1, self.beta2, self.epsilon)


# batch loss function: (params, examples, cfg) -> (scalar loss, number of items)
LossFn = Callable[[ModelParams, Sequence, TrainConfig], tuple[Tensor, int]]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    # keyed on (seed, epoch) so a resumed run reshuffles identically
    return np.random.default_rng([seed, epoch]).permutation(n)


def fit(params: ModelParams, examples: Sequence, loss_fn: LossFn, task: str,
        cfg: TrainConfig, state: AdamState | None = None, start_epoch: int = 0,
        on_epoch: Callable[[int, float, AdamState], None] | None = None,
        ) -> tuple[list[float], AdamState]:
    """Train in place; returns the per-epoch mean loss and the optimizer state.

    The per-epoch loss is the item-weighted mean of the batch losses.
    """
    if not examples:
        raise ValueError("training set is empty")
    state = state or cfg.adam()
    tensors = params.task_tensors(task)
    for t in tensors.values():
        t.zero_grad()
    losses = []
    for epoch in range(start_epoch, cfg.epochs):
        order = epoch_order(len(examples), cfg.seed, epoch)
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[lo:lo + cfg.batch_size]]
            with Tape() as tape:
                loss, n = loss_fn(params, batch, cfg)
            tape.backward(loss)
            adam_step(tensors, state, params.frozen_rows)
            total += loss.item() * n
            count += n
        losses.append(total / count)
        log.info("epoch %d loss %.6f", epoch + 1, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], state)
    return losses, state
