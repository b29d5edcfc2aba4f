"""Next-token-prediction pre-training loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as M
from . import numerics as nx
from .optim import AdamW


class DivergenceError(FloatingPointError):
    pass


def loss_and_grads(params: dict[str, np.ndarray], loss_fn: Callable) -> tuple[float, dict, object]:
    """Evaluate ``loss_fn(P) -> (scalar Tensor, aux)`` under a tape; grads keyed by name."""
    P = M.as_tensors(params, requires_grad=True)
    with nx.Tape() as tape:
        loss, aux = loss_fn(P)
    names = sorted(P)
    grads = tape.gradient(loss, [P[n] for n in names])
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"loss became non-finite ({value})")
    return value, dict(zip(names, grads)), aux


@dataclass
class TrainData:
    """Featurized events with their target semantic IDs, in chronological order."""
    batch: M.Batch
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.batch)


def prepare(featurizer: M.Featurizer, events, sid_of) -> TrainData:
    order = sorted(range(len(events)), key=lambda i: (events[i].timestamp, str(events[i].user_id)))
    events = [events[i] for i in order]
    batch = featurizer.batch([e.history for e in events], [sid_of[e.target] for e in events])
    return TrainData(batch, np.array([e.timestamp for e in events]))


def batch_rows(n: int, batch_size: int, step: int, seed: int, order: str = "shuffle") -> np.ndarray:
    """Rows used at ``step``; a pure function of its arguments so runs can resume exactly."""
    per_epoch = max(1, -(-n // batch_size))
    epoch, k = divmod(step, per_epoch)
    if order == "chronological":
        perm = np.arange(n)
    else:
        perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * batch_size:(k + 1) * batch_size]


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)

    def add(self, step, loss, norm) -> None:
        self.steps.append(step)
        self.losses.append(loss)
        self.grad_norms.append(norm)

    def to_csv(self) -> str:
        rows = ["step,loss,grad_norm"]
        rows += [f"{s},{l:.17g},{g:.17g}" for s, l, g in zip(self.steps, self.losses, self.grad_norms)]
        return "\n".join(rows) + "\n"


def ntp_step(params, opt: AdamW, batch: M.Batch, cfg: M.ModelConfig) -> tuple[float, float]:
    loss, grads, _ = loss_and_grads(params, lambda P: (M.ntp_loss(P, batch, cfg), None))
    return loss, opt.update(params, grads)


def pretrain(params, cfg: M.ModelConfig, data: TrainData, opt: AdamW, steps: int, batch_size: int = 32,
             seed: int = 0, order: str = "shuffle", start_step: int = 0,
             callback: Callable | None = None, log: TrainLog | None = None) -> TrainLog:
    """Run steps ``start_step .. steps-1``; ``callback(step, params)`` after each step."""
    log = log or TrainLog()
    for step in range(start_step, steps):
        rows = batch_rows(len(data), batch_size, step, seed, order)
        loss, norm = ntp_step(params, opt, data.batch.take(rows).trim(), cfg)
        log.add(step, loss, norm)
        if callback is not None:
            callback(step, params)
    return log


def mean_ntp(params, cfg: M.ModelConfig, data: TrainData, batch_size: int = 128) -> float:
    P = M.as_tensors(params)
    total = 0.0
    for s in range(0, len(data), batch_size):
        b = data.batch.take(np.arange(s, min(s + batch_size, len(data)))).trim()
        total += float(M.ntp_losses(P, b, cfg).data.sum())
    return total / len(data)
