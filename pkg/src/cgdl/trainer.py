"""Seeded SGD training loop for the ladder model."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, save_checkpoint
from .data import LabeledImageSet
from .errors import ConfigError, ContractError, NonFiniteError, TrainingDiverged
from .ladder import LadderModel, forward, infer
from .numerics import Tensor
from .objective import DEFAULT_LAMBDA, LossBreakdown, beta_schedule, combine, loss_terms

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "epoch", "recon", "kl_latent", "kl_layers_sum", "ce", "beta", "total",
    "closed_set_train_accuracy", "wall_time",
)


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.001
    batch_size: int = 64
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    checkpoint_every: int = 0
    momentum: float = 0.0
    recon_weight: float = 1.0
    beta_max: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.lam < 0 or self.recon_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 <= self.beta_max <= 1.0:
            raise ConfigError("beta_max must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


@dataclass
class TrainLogEntry:
    epoch: int
    recon: float
    kl_latent: float
    kl_layers_sum: float
    ce: float
    beta: float
    total: float
    closed_set_train_accuracy: float
    wall_time: float

    def as_row(self) -> dict:
        return dataclasses.asdict(self)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float) -> Sequence[Tensor]:
    """In-place ``p <- p - lr * g``; a ``None`` gradient leaves ``p`` alone."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p.data -= lr * g
    return params


class SGD:
    """Plain SGD with optional heavy-ball momentum (off by default)."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.momentum == 0.0:
            sgd_step(self.params, grads, self.lr)
            return
        for i, g in enumerate(grads):
            if g is None:
                continue
            self._velocity[i] = self.momentum * self._velocity[i] + g
        sgd_step(self.params, self._velocity, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def closed_set_accuracy(model: LadderModel, images, labels) -> float:
    """Fraction of samples whose deterministic prediction equals the label."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    pred = infer(model, images)["probs"].argmax(axis=1)
    return float(np.mean(pred == labels))


def _batch_loss(model: LadderModel, x: np.ndarray, y: np.ndarray, beta: float,
                cfg: TrainConfig, rng, epoch: int, batch: int) -> LossBreakdown:
    # overflow surfaces as NonFiniteError below, so numpy's warnings are noise
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _checked_loss(model, x, y, beta, cfg, rng, epoch, batch)


def _checked_loss(model, x, y, beta, cfg, rng, epoch, batch) -> LossBreakdown:
    try:
        trace = forward(model, x, mode="train", rng=rng)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"forward pass ({exc.op})", epoch, batch) from exc
    try:
        terms = loss_terms(trace, x, y, model["class_means"])
    except NonFiniteError as exc:
        raise TrainingDiverged(_first_bad_term(trace, x, y, model), epoch, batch) from exc
    for name in ("recon", "kl_latent", "ce"):
        if not np.isfinite(terms[name].item()):
            raise TrainingDiverged(name, epoch, batch)
    for i, t in enumerate(terms["kl_layers"]):
        if not np.isfinite(t.item()):
            raise TrainingDiverged(f"kl_layers[{i}]", epoch, batch)
    return combine(terms, beta, cfg.lam, cfg.recon_weight)


def _first_bad_term(trace, x, y, model) -> str:
    from . import objective as obj

    checks = [
        ("recon", lambda: obj.recon_l1(np.reshape(x, trace.recon.shape), trace.recon)),
        ("kl_latent", lambda: obj.kl_conditional(trace.mu, trace.var, model["class_means"].data[y])),
    ]
    for l, (q, p) in enumerate(zip(trace.merged, trace.downward)):
        if q is not None and p is not None:
            checks.append((f"kl_layers[{l}]", lambda q=q, p=p: obj.kl_gaussian_pair(q, p)))
    checks.append(("ce", lambda: obj.cross_entropy(trace.logits, y)))
    with nx.no_grad():
        for name, fn in checks:
            try:
                fn()
            except NonFiniteError:
                return name
    return "total"


def train(
    model: LadderModel,
    dataset: LabeledImageSet,
    config: TrainConfig,
    log_path=None,
    checkpoint_path=None,
) -> tuple[LadderModel, list[TrainLogEntry]]:
    """Train ``model`` in place with minibatch SGD.

    Shuffling and reparameterisation noise come from separate streams seeded
    by ``config.seed``, so identical inputs give bit-identical parameters.
    The KL weight ramps linearly from 0 at the first epoch to ``beta_max`` at
    the last. The last partial batch of an epoch is kept.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    K = model.config.num_classes
    if dataset.labels.min() < 0 or dataset.labels.max() >= K:
        raise ConfigError(f"dataset labels must lie in [0, {K})")
    x_all = dataset.flat()
    y_all = dataset.labels
    n = len(dataset)
    shuffle_rng = nx.make_rng(config.seed, "shuffle")
    eps_rng = nx.make_rng(config.seed, "eps")
    opt = SGD(model.parameters(), config.learning_rate, config.momentum)
    history: list[TrainLogEntry] = []
    writer = None
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    try:
        for epoch in range(config.epochs):
            start = time.perf_counter()
            beta = config.beta_max * beta_schedule(epoch, max(config.epochs - 1, 1))
            order = shuffle_rng.permutation(n)
            sums = dict.fromkeys(("recon", "kl_latent", "kl_layers_sum", "ce", "total"), 0.0)
            for b, lo in enumerate(range(0, n, config.batch_size)):
                idx = order[lo:lo + config.batch_size]
                opt.zero_grad()
                br = _batch_loss(model, x_all[idx], y_all[idx], beta, config, eps_rng, epoch, b)
                nx.backward(br.tensor)
                opt.step()
                w = len(idx) / n
                sums["recon"] += w * br.recon
                sums["kl_latent"] += w * br.kl_latent
                sums["kl_layers_sum"] += w * br.kl_layers_sum
                sums["ce"] += w * br.ce
                sums["total"] += w * br.total
            if not all(np.isfinite(p.data).all() for p in model.parameters()):
                raise TrainingDiverged("parameters after update", epoch, b)
            acc = closed_set_accuracy(model, x_all, y_all)
            entry = TrainLogEntry(epoch=epoch, beta=beta, closed_set_train_accuracy=acc,
                                  wall_time=time.perf_counter() - start, **sums)
            history.append(entry)
            if writer is not None:
                writer.writerow(entry.as_row())
            log.debug("epoch %d total=%.4f ce=%.4f acc=%.4f", epoch, entry.total, entry.ce, acc)
            if checkpoint_path is not None and config.checkpoint_every > 0 \
                    and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, Checkpoint(model, seed=config.seed, epoch=epoch + 1))
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, Checkpoint(model, seed=config.seed, epoch=config.epochs))
    return model, history
