"""Systematic (8,2) Reed-Solomon encoder over GF(2^8).

Request framing over UDP: a 32-bit big-endian request id followed by 4096 data
bytes, split into 8 blocks of 512. The reply is the same id followed by the two
512-byte parity blocks (1024 bytes).
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import gf256

K = 8
M = 2
N = K + M
BLOCK_SIZE = 512
REQUEST_DATA = K * BLOCK_SIZE
_ID = struct.Struct(">I")


class RsConfigError(RuntimeError):
    """The generator matrix failed its MDS check."""


class RsRequestError(ValueError):
    pass


def vandermonde(rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix with entry (i, j) = (alpha^i)^j, alpha = 2."""
    v = np.zeros((rows, cols), dtype=np.uint8)
    for i in range(rows):
        x = gf256.power(2, i)
        for j in range(cols):
            v[i, j] = gf256.power(x, j)
    return v


def _check_mds(gen: np.ndarray, k: int) -> None:
    for rows in itertools.combinations(range(gen.shape[0]), k):
        if not gf256.is_invertible(gen[list(rows)]):
            raise RsConfigError(f"rows {rows} of the generator are singular")


@lru_cache(maxsize=None)
def _generator(k: int, m: int) -> np.ndarray:
    v = vandermonde(k + m, k)
    try:
        top_inv = gf256.mat_inverse(v[:k])
    except gf256.SingularMatrix as exc:
        raise RsConfigError("Vandermonde top block is singular") from exc
    gen = gf256.matmul(v, top_inv)
    _check_mds(gen, k)
    gen.setflags(write=False)
    return gen


def rs_build_generator(k: int = K, m: int = M) -> np.ndarray:
    """Systematic (k+m) x k generator; rows 0..k-1 are the identity."""
    return _generator(k, m).copy()


@dataclass
class RsCode:
    k: int = K
    m: int = M
    block_size: int = BLOCK_SIZE
    generator: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.generator is None:
            self.generator = rs_build_generator(self.k, self.m)

    def encode(self, blocks: Sequence[bytes]) -> list[bytes]:
        return rs_encode(blocks, self.generator)


def _as_matrix(blocks: Sequence[bytes], k: int) -> np.ndarray:
    if len(blocks) != k:
        raise RsRequestError(f"expected {k} data blocks, got {len(blocks)}")
    sizes = {len(b) for b in blocks}
    if len(sizes) != 1:
        raise RsRequestError(f"data blocks have unequal lengths {sorted(sizes)}")
    return np.frombuffer(b"".join(bytes(b) for b in blocks), dtype=np.uint8).reshape(k, -1)


def rs_encode(blocks: Sequence[bytes], generator: Optional[np.ndarray] = None) -> list[bytes]:
    """Parity blocks: parity[j][i] = sum_k gen[K+j][k] * data[k][i]."""
    gen = _generator(K, M) if generator is None else generator
    k = gen.shape[1]
    data = _as_matrix(blocks, k)
    parity = gf256.matmul(gen[k:], data)
    return [row.tobytes() for row in parity]


def split_blocks(data: bytes, k: int = K) -> list[bytes]:
    if len(data) % k:
        raise RsRequestError(f"data length {len(data)} is not a multiple of {k}")
    n = len(data) // k
    return [data[i * n:(i + 1) * n] for i in range(k)]


def encode_request(req_id: int, data: bytes) -> bytes:
    if len(data) != REQUEST_DATA:
        raise RsRequestError(f"request data must be {REQUEST_DATA} bytes")
    return _ID.pack(req_id) + data


def handle_request(payload: bytes) -> bytes:
    """RS tile logic: request id + 4096 bytes in, request id + 1024 parity bytes out."""
    if len(payload) != _ID.size + REQUEST_DATA:
        raise RsRequestError(f"bad request length {len(payload)}")
    (req_id,) = _ID.unpack_from(payload)
    parity = rs_encode(split_blocks(payload[_ID.size:]))
    return _ID.pack(req_id) + b"".join(parity)


def decode_response(payload: bytes) -> tuple[int, list[bytes]]:
    if len(payload) != _ID.size + M * BLOCK_SIZE:
        raise RsRequestError(f"bad response length {len(payload)}")
    (req_id,) = _ID.unpack_from(payload)
    body = payload[_ID.size:]
    return req_id, [body[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE] for i in range(M)]
