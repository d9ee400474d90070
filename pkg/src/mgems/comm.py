"""Parameter-server message exchange with Bernoulli upload failures.

Failures are sender-side: when an upload is lost, every receiver misses it
and the sender becomes the slot's problematic agent (PA), which its peers
infer from the missing periodic update.  One heartbeat upload per agent per
slot determines PA status; algorithms that iterate (Nash rounds, ADMM
iterations) bill extra messages through the same failure probability, which
feeds the failed-transmission statistics but cannot change PA status
mid-slot.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

KIND_Q = "q-values"
KIND_DUAL = "dual-variables"
KIND_EQ = "equilibrium-info"


@dataclass(frozen=True)
class FailureModel:
    p_fail: float
    active_start: int = 0      # first episode with failures
    active_end: int = -1       # exclusive; -1 means never ends

    def __post_init__(self):
        if not 0.0 <= self.p_fail <= 1.0:
            raise ValueError("p_fail must be a probability")

    def active(self, episode: int) -> bool:
        if self.p_fail == 0.0 or episode < self.active_start:
            return False
        return self.active_end < 0 or episode < self.active_end


@dataclass(frozen=True)
class ExchangeRecord:
    slot: int
    sender: str
    receivers: tuple[str, ...]
    delivered: tuple[bool, ...]
    kind: str

    @property
    def ok(self) -> bool:
        return all(self.delivered)


def broadcast(sender: str, receivers, kind: str, slot: int, model: FailureModel,
              episode: int, rng: np.random.Generator) -> ExchangeRecord:
    """One upload through the parameter server.

    The upload as a whole fails with the model's probability (no draw is
    consumed when failures are impossible, so a zero-probability model is
    bit-identical to having no communication layer at all).
    """
    receivers = tuple(receivers)
    ok = True
    if model.active(episode) and model.p_fail > 0.0:
        ok = rng.random() >= model.p_fail
    return ExchangeRecord(slot=slot, sender=sender, receivers=receivers,
                          delivered=(ok,) * len(receivers), kind=kind)


def failed_count(records) -> int:
    """Number of failed uploads in a log."""
    return sum(1 for r in records if not r.ok)


def bill_messages(n_messages: int, model: FailureModel, episode: int,
                  rng: np.random.Generator) -> int:
    """Failures among n bulk messages (iteration rounds), one binomial draw."""
    if n_messages <= 0:
        return 0
    if not model.active(episode) or model.p_fail == 0.0:
        return 0
    return int(rng.binomial(n_messages, model.p_fail))


def export_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "sender", "kind", "delivered"])
        for r in records:
            writer.writerow([r.slot, r.sender, r.kind, int(r.ok)])
