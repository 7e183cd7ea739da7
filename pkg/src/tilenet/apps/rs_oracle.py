"""Reference erasure decoder used to check the encoder.

Shares no code with the encoder or the table-based field arithmetic: products
are computed bit by bit and the generator is rebuilt from scratch.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence


class Unrecoverable(ValueError):
    pass


def gf_mul(a: int, b: int) -> int:
    r = 0
    while b:
        if b & 1:
            r ^= a
        a <<= 1
        if a & 0x100:
            a ^= 0x11D
        b >>= 1
    return r


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError
    # a^254 = a^-1
    r, base, e = 1, a, 254
    while e:
        if e & 1:
            r = gf_mul(r, base)
        base = gf_mul(base, base)
        e >>= 1
    return r


def gf_pow(a: int, n: int) -> int:
    r = 1
    for _ in range(n):
        r = gf_mul(r, a)
    return r


def _inverse(m: list[list[int]]) -> list[list[int]]:
    n = len(m)
    a = [row[:] + [int(i == j) for j in range(n)] for i, row in enumerate(m)]
    for c in range(n):
        p = next((r for r in range(c, n) if a[r][c]), None)
        if p is None:
            raise Unrecoverable("selected rows are linearly dependent")
        a[c], a[p] = a[p], a[c]
        iv = gf_inv(a[c][c])
        a[c] = [gf_mul(iv, x) for x in a[c]]
        for r in range(n):
            if r != c and a[r][c]:
                f = a[r][c]
                a[r] = [x ^ gf_mul(f, y) for x, y in zip(a[r], a[c])]
    return [row[n:] for row in a]


def _matmul(a: list[list[int]], b: list[list[int]]) -> list[list[int]]:
    out = []
    for row in a:
        acc = [0] * len(b[0])
        for f, brow in zip(row, b):
            if f:
                acc = [x ^ gf_mul(f, y) for x, y in zip(acc, brow)]
        out.append(acc)
    return out


def reference_generator(k: int = 8, m: int = 2) -> list[list[int]]:
    v = [[gf_pow(gf_pow(2, i), j) for j in range(k)] for i in range(k + m)]
    return _matmul(v, _inverse(v[:k]))


@lru_cache(maxsize=None)
def _decode_matrix(rows: tuple[int, ...], k: int, m: int) -> tuple[tuple[int, ...], ...]:
    gen = reference_generator(k, m)
    return tuple(tuple(r) for r in _inverse([gen[i] for i in rows]))


@lru_cache(maxsize=256)
def _scale_table(f: int) -> bytes:
    return bytes(gf_mul(f, x) for x in range(256))


def rs_decode_oracle(blocks: Sequence[bytes], indices: Sequence[int], k: int = 8,
                     m: int = 2) -> list[bytes]:
    """Recover the k data blocks from any k of the k+m coded blocks."""
    if len(blocks) != len(indices):
        raise ValueError("blocks and indices differ in length")
    if len(set(indices)) < k:
        raise Unrecoverable(f"need {k} distinct blocks, got {len(set(indices))}")
    if any(not 0 <= i < k + m for i in indices):
        raise ValueError("block index out of range")
    chosen = sorted(zip(indices, blocks))[:k]
    inv = _decode_matrix(tuple(i for i, _ in chosen), k, m)
    rows = [bytes(b) for _, b in chosen]
    size = len(rows[0])
    out = []
    for r in range(k):
        acc = 0
        for f, src in zip(inv[r], rows):
            if f:
                acc ^= int.from_bytes(src.translate(_scale_table(f)), "big")
        out.append(acc.to_bytes(size, "big"))
    return out
