"""Single-example SGD trainer with constant warmup and cosine decay.

Training walks the support set one example at a time for a fixed number of
epochs.  Every epoch reshuffles the support order from a seeded stream;
gradients are clipped by their global norm before each update.  The learning
rate is ``warmup_lr`` throughout the warmup epochs and then follows a cosine
from the base rate down to exactly zero at the final step, with the
post-warmup progress spanning [0, 1].

The encoder pair is read-only throughout; only the learner's named tensors
are updated.  A non-finite loss aborts the run immediately with a
diagnostic, rather than silently continuing from a poisoned state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset, Episode, split_view
from .encoders import DEFAULT_TEMPLATE, World
from .learners import (
    DEFAULT_TAU,
    PromptState,
    cocoop_loss,
    coop_loss,
    elbo_loss,
    init_prompt_state,
    proda_loss,
)

KIND_CHOICES = ("zero_shot", "coop", "cocoop", "proda", "vpt_global", "vpt_conditional")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the step and value that tripped it."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    learner: str = "coop"
    learning_rate: float = 2e-3
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    epochs: int = 40
    batch_size: int = 1
    grad_clip: float = 10.0
    seed: int = 0
    kl_weight: float = 1.0
    train_samples: int = 1
    k_proda: int = 4
    proda_mc: int = 16
    tau: float = DEFAULT_TAU
    init: str = "template"
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self) -> None:
        if self.learner not in KIND_CHOICES:
            raise ValueError(f"unknown learner {self.learner!r} (expected one of {KIND_CHOICES})")
        if self.learning_rate <= 0 or self.warmup_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ValueError("need epochs >= 1 and 0 <= warmup_epochs < epochs")
        if self.batch_size != 1:
            raise ValueError("only single-example updates are supported (batch_size=1)")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")
        if self.train_samples < 1:
            raise ValueError("train_samples must be >= 1")
        if self.k_proda < 2:
            raise ValueError("k_proda must be >= 2")
        if self.proda_mc < 1:
            raise ValueError("proda_mc must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class TrainHistory:
    """Per-epoch mean loss and learning rate of one run."""

    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "lr"])
            for rec in self.records:
                writer.writerow([rec.epoch, repr(float(rec.mean_loss)), repr(float(rec.lr))])


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Learning rate for the global update index ``step``.

    Steps inside the warmup epochs return ``warmup_lr``; afterwards the rate
    follows ``base * (1 + cos(pi * progress)) / 2`` with progress reaching 1
    at the last step, so the final update rate is exactly zero.
    """
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be >= 1")
    if step < 0:
        raise ValueError("step must be nonnegative")
    warm = config.warmup_epochs * steps_per_epoch
    if step < warm:
        return config.warmup_lr
    total = config.epochs * steps_per_epoch
    last = total - 1
    if last <= warm:
        return config.learning_rate
    progress = (step - warm) / (last - warm)
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def _global_norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def train(
    world: World,
    dataset: Dataset,
    episode: Episode,
    config: TrainConfig,
) -> tuple[PromptState, TrainHistory]:
    """Fit a prompt learner on the episode's support set.

    Returns the trained state and the per-epoch loss history.  Runs with
    identical config (and world/episode) are bit-identical.  ``zero_shot``
    returns its fixed state untouched with an empty history.
    """
    state = init_prompt_state(
        world,
        config.learner,
        seed=config.seed,
        init=config.init,
        template=config.template,
        k_proda=config.k_proda,
    )
    history = TrainHistory()
    if config.learner == "zero_shot":
        return state, history
    support = split_view(dataset, episode, "support")
    class_ids = support.class_token_ids
    n = support.features.shape[0]
    n_classes = len(class_ids)
    shuffle_rng = np.random.default_rng([config.seed, 20])
    noise_rng = np.random.default_rng([config.seed, 21])
    params = [tensor for _, tensor in state.trainable()]

    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_lr = lr_at(step, config, n)
        losses = np.zeros(n)
        for j, idx in enumerate(order):
            x = support.features[idx]
            y = int(support.labels[idx])
            if config.learner == "coop":
                loss = coop_loss(world, state, class_ids, x, y, tau=config.tau)
            elif config.learner == "cocoop":
                loss = cocoop_loss(world, state, class_ids, x, y, tau=config.tau)
            elif config.learner in ("vpt_global", "vpt_conditional"):
                z = noise_rng.normal(size=(config.train_samples, world.config.embed_dim))
                loss = elbo_loss(
                    world, state, class_ids, x, y, z,
                    beta=config.kl_weight, tau=config.tau,
                )
            else:
                z = noise_rng.normal(size=(config.proda_mc, n_classes, world.config.out_dim))
                loss = proda_loss(world, state, class_ids, x, y, z, tau=config.tau)
            value = float(loss.values)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at step {step} (epoch {epoch}, example {int(idx)})"
                )
            losses[j] = value
            loss.backward()
            lr = lr_at(step, config, n)
            grads = [t.grad for t in params]
            norm = _global_norm(grads)
            scale = 1.0 if norm <= config.grad_clip else config.grad_clip / norm
            for tensor, grad in zip(params, grads):
                tensor.values -= (lr * scale) * grad
            state.zero_grads()
            step += 1
        history.records.append(EpochRecord(epoch=epoch, mean_loss=float(losses.mean()), lr=epoch_lr))
    return state, history
