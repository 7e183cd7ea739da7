"""Seeded loss, reordering and duplication on the external wire.

Faults are only ever applied to wire traffic; the NoC itself is reliable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Optional, TypeVar

T = TypeVar("T")


@dataclass
class FaultModel:
    p_loss: float = 0.0
    p_dup: float = 0.0
    p_reorder: float = 0.0
    # a reordered packet is held back by 1..reorder_delay extra cycles
    reorder_delay: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("p_loss", "p_dup", "p_reorder"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        if self.reorder_delay < 1:
            raise ValueError("reorder_delay must be positive")

    @property
    def is_identity(self) -> bool:
        return self.p_loss == 0 and self.p_dup == 0 and self.p_reorder == 0


class FaultyLink:
    """Stateful per-direction fault injector with its own RNG stream."""

    def __init__(self, model: FaultModel, stream: int = 0):
        self.model = model
        self.rng = random.Random(f"{model.seed}:{stream}")
        self.sent = 0
        self.lost = 0
        self.duplicated = 0
        self.reordered = 0

    def perturb(self, cycle: int, item: T) -> list[tuple[int, T]]:
        """Deliveries for one packet sent at ``cycle`` (possibly none, possibly two)."""
        m = self.model
        self.sent += 1
        # always draw the same number of variates so streams stay aligned
        r_loss, r_dup, r_re, r_delay = (self.rng.random() for _ in range(4))
        if r_loss < m.p_loss:
            self.lost += 1
            return []
        out = [(cycle, item)]
        if r_dup < m.p_dup:
            self.duplicated += 1
            out.append((cycle, item))
        if r_re < m.p_reorder:
            self.reordered += 1
            extra = 1 + int(r_delay * m.reorder_delay)
            out[0] = (cycle + extra, item)
        return out


def fault_inject(traffic: Iterable[tuple[int, T]], model: FaultModel,
                 seed: Optional[int] = None) -> list[tuple[int, T]]:
    """Apply a fault model to a timed packet stream; output is sorted by delivery time.

    The sort is stable, so with no reordering the original order is kept.
    """
    if seed is not None and seed != model.seed:
        model = FaultModel(model.p_loss, model.p_dup, model.p_reorder, model.reorder_delay, seed)
    link = FaultyLink(model)
    out: list[tuple[int, T]] = []
    for cycle, item in traffic:
        out.extend(link.perturb(cycle, item))
    out.sort(key=lambda x: x[0])
    return out
