"""UDP echo application."""

from __future__ import annotations

from ..fabric import Echo


def echo_handle(payload: bytes) -> bytes:
    # the stack swaps addresses and ports; the application returns the bytes as-is
    return bytes(payload)


__all__ = ["Echo", "echo_handle"]
