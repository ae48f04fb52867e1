"""Adaptive multi-task loss weights.

At each epoch end every task weight becomes ``c_t / L_t`` normalized to sum
to one, where ``L_t`` is the task's summed (unweighted) loss over the epoch
and ``c_t`` a hand-set prior.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

log = logging.getLogger(__name__)

DEGENERATE_LOSS = 1e-9
DEFAULT_PRIORS = {"obstacle": 5.0, "parking": 3.0, "freespace": 1.0}


@dataclass
class TaskLossLedger:
    tasks: tuple[str, ...]
    priors: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)
    sums: dict[str, float] = field(default_factory=dict)
    raw_weights: dict[str, float] = field(default_factory=dict)
    epoch: int = 0
    flags: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        for t in self.tasks:
            if self.priors.get(t, 0.0) <= 0:
                raise ValueError(f"task prior for {t!r} must be positive")
        # first epoch: every weight is 1, no normalization yet
        self.weights = {t: 1.0 for t in self.tasks}
        self.raw_weights = {t: 1.0 for t in self.tasks}
        self.reset_sums()

    def reset_sums(self):
        self.sums = {t: 0.0 for t in self.tasks}
        self._parts = {t: [] for t in self.tasks}


def new_ledger(tasks, priors=None) -> TaskLossLedger:
    priors = dict(priors or {})
    return TaskLossLedger(tuple(tasks), {t: float(priors.get(t, 1.0)) for t in tasks})


def accumulate(ledger: TaskLossLedger, task: str, value) -> None:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if v < 0:
        ledger.flags.append(f"epoch {ledger.epoch}: negative {task} loss {v:.6g}")
    ledger._parts[task].append(v)
    ledger.sums[task] = math.fsum(ledger._parts[task])


def update_weights(ledger: TaskLossLedger) -> dict[str, float]:
    """Recompute weights from the epoch sums, then clear the sums."""
    raw = {}
    for t in ledger.tasks:
        total = ledger.sums[t]
        if total <= DEGENERATE_LOSS:
            raw[t] = ledger.raw_weights[t]
            ledger.flags.append(f"epoch {ledger.epoch}: {t} loss sum {total:.3g} kept previous weight")
        else:
            raw[t] = ledger.priors[t] / total
    if all(ledger.sums[t] <= DEGENERATE_LOSS for t in ledger.tasks):
        log.warning("all task losses degenerate at epoch %d; weights unchanged", ledger.epoch)
    else:
        norm = math.fsum(raw.values())
        ledger.raw_weights = raw
        ledger.weights = {t: raw[t] / norm for t in ledger.tasks}
    ledger.history.append({"epoch": ledger.epoch, "sums": dict(ledger.sums),
                           "priors": dict(ledger.priors), "weights": dict(ledger.weights)})
    ledger.epoch += 1
    ledger.reset_sums()
    return dict(ledger.weights)


def combined_loss(ledger: TaskLossLedger, batch_losses: dict):
    """Weighted sum of per-task batch losses; weights act as constants."""
    total = 0.0
    for t in ledger.tasks:
        if t not in batch_losses or batch_losses[t] is None:
            ledger.flags.append(f"epoch {ledger.epoch}: missing {t} loss")
            continue
        total = total + ledger.weights[t] * batch_losses[t]
    return total


def balance_rows(ledger: TaskLossLedger):
    """``(epoch, task, L_t, c_t, w_t)`` rows from the update history."""
    for h in ledger.history:
        for t in ledger.tasks:
            yield h["epoch"], t, h["sums"][t], h["priors"][t], h["weights"][t]
