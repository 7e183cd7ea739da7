"""Round-robin work distribution over a replica group."""

from __future__ import annotations

from typing import Iterable, Sequence

from ..fabric import Scheduler

# cycles the scheduler tile spends on one 64-byte request:
# a three-flit NoC message, then one recovery cycle
SCHEDULER_MESSAGE_FLITS = 3
SCHEDULER_RECOVERY = 1


def scheduler_dispatch(requests: Iterable, replicas: Sequence[str]) -> list[tuple[object, str]]:
    """Assign each request to a replica in strict round-robin order."""
    if not replicas:
        raise ValueError("no replicas")
    return [(req, replicas[i % len(replicas)]) for i, req in enumerate(requests)]


def scheduler_ceiling_gbps(payload_bytes: int, clock_hz: float = 250e6,
                           message_flits: int = SCHEDULER_MESSAGE_FLITS,
                           recovery: int = SCHEDULER_RECOVERY) -> float:
    """Goodput bound set by a scheduler handling one request every flits+recovery cycles."""
    return payload_bytes * 8 * clock_hz / (message_flits + recovery) / 1e9


__all__ = ["Scheduler", "scheduler_dispatch", "scheduler_ceiling_gbps"]
