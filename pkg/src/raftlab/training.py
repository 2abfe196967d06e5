"""Shared mini-batch training loop with early stopping.

Examples are processed one at a time (each builds its own graph); a batch is
realized as gradient accumulation over batch_size examples followed by one
Adam step. Dev-metric epoch selection keeps the best parameter snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Adam, Tensor, scale
from .errors import DataError


@dataclass
class TrainConfig:
    """Optimizer settings plus the toy encoder dimensions."""

    lr: float = 3e-5
    batch_size: int = 16
    max_epochs: int = 20
    patience: int = 5
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 128
    dropout_rate: float = 0.0
    use_positional: bool = True
    max_vocab: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def fit(params: dict[str, Tensor],
        examples: list,
        loss_fn: Callable,
        dev_metric_fn: Callable[[], float],
        config: TrainConfig,
        seed: int,
        log_extra: Callable[[list[dict]], dict] | None = None) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Train params in place; return (best parameter snapshot, epoch log).

    loss_fn(example, rng) must return (scalar loss Tensor, components dict);
    the component means are logged per epoch alongside the dev metric.
    """
    if not examples:
        raise DataError("empty training set")
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng([seed, 29])
    best_metric = -np.inf
    best = {k: p.data.copy() for k, p in params.items()}
    log: list[dict] = []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(examples))
        epoch_parts: list[dict] = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            for idx in chunk:
                loss, parts = loss_fn(examples[int(idx)], rng)
                epoch_parts.append(parts)
                scale(loss, 1.0 / len(chunk)).backward()
            opt.step()
            opt.zero_grad()
        metric = float(dev_metric_fn())
        entry = {"epoch": epoch}
        for key in epoch_parts[0]:
            entry[key] = float(np.mean([p[key] for p in epoch_parts]))
        entry["dev_metric"] = metric
        if log_extra is not None:
            entry.update(log_extra(epoch_parts))
        log.append(entry)
        if metric >= best_metric:
            # ties prefer the later epoch: other heads keep improving while
            # the selection metric sits at its ceiling
            if metric > best_metric:
                stale = 0
            else:
                stale += 1
            best_metric = metric
            best = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
        if stale >= config.patience:
            break
    for k, p in params.items():
        p.data = best[k].copy()
    return best, log
