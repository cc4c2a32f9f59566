"""Distributed matrix transpose benchmark over simulated cards.

The ``n x n`` matrix of 64-bit words is cut into ``k`` block-columns. Card
``j`` receives its ``n x b`` block (row-major), transposes it locally and
returns ``b x n`` rows of the global transpose, which the host stacks in
card order. Cards never talk to each other.

Timing is split into three simulated phases:

``program``   broadcast of a small role bitstream (not part of the benchmark)
``transfer``  loading every card's input block
``run``       from the broadcast start command until the last output word
              is back at the host; speedup is measured on this phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fabric import LinkParams
from .frames import KernelCmd
from .host import ALL
from .kernels import shape_param
from .scenario import build_testbed

ROLE_BITSTREAM_BYTES = 64 * 1024


class IndivisiblePartition(ValueError):
    def __init__(self, n: int, k: int):
        super().__init__(f"matrix dimension {n} is not divisible by {k} devices (pass pad=True to zero-pad)")
        self.n = n
        self.k = k


def padded_dim(n: int, k: int) -> int:
    return -(-n // k) * k


def partition(matrix: np.ndarray, k: int, pad: bool = False) -> list[np.ndarray]:
    """Block-columns of ``matrix``, one per device.

    With ``pad`` the matrix is zero padded on the right and bottom up to the
    next multiple of ``k``; :func:`reassemble` crops the padding again.
    """
    n = matrix.shape[0]
    if matrix.ndim != 2 or matrix.shape[1] != n:
        raise ValueError("matrix must be square")
    if k < 1:
        raise ValueError("need at least one device")
    if n % k:
        if not pad:
            raise IndivisiblePartition(n, k)
        m = padded_dim(n, k)
        full = np.zeros((m, m), dtype=matrix.dtype)
        full[:n, :n] = matrix
        matrix = full
    b = matrix.shape[0] // k
    return [np.ascontiguousarray(matrix[:, j * b:(j + 1) * b]) for j in range(k)]


def reassemble(blocks: list[np.ndarray], n: Optional[int] = None) -> np.ndarray:
    """Stack per-device transposed blocks into the global transpose, cropped to ``n``."""
    out = np.vstack(blocks)
    if n is not None:
        out = out[:n, :n]
    return out


def weak_dim(n0: int, k: int) -> int:
    """Dimension that gives each of ``k`` devices about ``n0**2`` elements, divisible by ``k``."""
    return padded_dim(math.ceil(n0 * math.sqrt(k)), k)


def random_matrix(n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2**64, size=(n, n), dtype=np.uint64)


def _to_bytes(a: np.ndarray) -> bytes:
    return a.astype(">u8").tobytes()


def _from_bytes(buf: bytes, rows: int, cols: int) -> np.ndarray:
    return np.frombuffer(buf, dtype=">u8").astype(np.uint64).reshape(rows, cols)


@dataclass
class PtransResult:
    k: int
    n: int
    scaling: str
    correct: bool
    elements_per_device: int
    times: dict = field(default_factory=dict)
    speedup: Optional[float] = None
    matrix_t: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {
            "k": self.k,
            "n": self.n,
            "scaling": self.scaling,
            "correct": self.correct,
            "elements_per_device": self.elements_per_device,
            "times": dict(self.times),
        }
        if self.speedup is not None:
            d["speedup"] = self.speedup
        return d


def run_ptrans(k: int, n: int = 512, scaling: str = "strong", *, seed: int = 0, pad: bool = False,
               link: Optional[LinkParams] = None, matrix: Optional[np.ndarray] = None,
               keep_output: bool = False) -> PtransResult:
    """Transpose an ``n x n`` matrix on ``k`` fresh simulated cards.

    For weak scaling ``n`` is the single-device dimension and the actual
    dimension grows as ``n * sqrt(k)`` (rounded up to a multiple of ``k``).
    """
    if scaling not in ("strong", "weak"):
        raise ValueError(f"unknown scaling mode {scaling!r}")
    if k < 1:
        raise ValueError("need at least one device")
    dim = weak_dim(n, k) if scaling == "weak" else n
    if matrix is None:
        matrix = random_matrix(dim, seed)
    elif matrix.shape != (dim, dim):
        raise ValueError(f"matrix must be {dim}x{dim}")
    blocks = partition(matrix, k, pad)
    rows, b = blocks[0].shape

    sc = build_testbed(k, link=link, seed=seed, switch_ports=max(12, k + 2))
    host, fabric = sc.host, sc.fabric
    host.discover()
    if len(host.registry) != k:
        raise RuntimeError(f"discovered {len(host.registry)} of {k} devices")
    # order devices the same way the blocks are ordered
    macs = [a.mac for a in sc.agents]

    role = np.random.default_rng(seed + 1).bytes(ROLE_BITSTREAM_BYTES)
    acks = host.program(ALL, role)
    if len(acks) != k:
        raise RuntimeError(f"only {len(acks)} of {k} devices programmed: {host.failures}")

    t0 = fabric.now
    host.write_args([(m, 0, _to_bytes(blk)) for m, blk in zip(macs, blocks)])
    t_transfer = fabric.now - t0

    t1 = fabric.now
    host.execute(ALL, KernelCmd(0, shape_param(rows, b)))
    outputs = host.collect_all(macs)
    t_run = fabric.now - t1

    got = reassemble([_from_bytes(outputs[m], b, rows) for m in macs], dim)
    correct = bool(np.array_equal(got, matrix.T))
    return PtransResult(
        k=k,
        n=dim,
        scaling=scaling,
        correct=correct,
        elements_per_device=rows * b,
        times={"program": host.phase_times["program"], "transfer": t_transfer, "run": t_run},
        matrix_t=got if keep_output else None,
    )


def sweep(ks=(1, 2, 4, 8), n: int = 512, scaling: str = "strong", *, seed: int = 0, pad: bool = False,
          link: Optional[LinkParams] = None, keep_output: bool = False) -> list[PtransResult]:
    """Run every ``k`` on its own scenario; speedup is relative to the first entry.

    For weak scaling the reported figure is the scaled speedup
    ``k * t_run(k0) / t_run(k)``.
    """
    results = [run_ptrans(k, n, scaling, seed=seed, pad=pad, link=link, keep_output=keep_output) for k in ks]
    base = results[0]
    for r in results:
        ratio = base.times["run"] / r.times["run"]
        r.speedup = ratio * (r.k / base.k) if scaling == "weak" else ratio * 1.0
    return results
