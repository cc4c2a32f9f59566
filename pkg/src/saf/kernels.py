"""Application kernels that can be placed in an agent's role.

Both kernels take one input argument (region 0) and write their result to
the output argument (region 1).
"""

from __future__ import annotations

import numpy as np

from .agent import KernelSlot

# Modeled PTRANS cost on the device. Calibrated so a 512 x 512 transpose
# dominates the collection time of its output over a 10 Gb/s host link,
# which is what makes scaling near-linear up to 8 devices.
PTRANS_NS_PER_ELEMENT = 1000.0


def shape_param(rows: int, cols: int) -> int:
    """Pack a matrix shape into the 64-bit kernel command data word."""
    if not (0 <= rows < 1 << 32 and 0 <= cols < 1 << 32):
        raise ValueError("matrix dimensions must fit in 32 bits")
    return rows << 32 | cols


def unpack_shape(param: int) -> tuple[int, int]:
    return param >> 32, param & 0xFFFFFFFF


def _identity(inputs, param):
    return inputs[0]


def identity_kernel(kernel_id: int = 0) -> KernelSlot:
    return KernelSlot(kernel_id, 2, _identity, name="identity")


def _ptrans(inputs, param):
    rows, cols = unpack_shape(param)
    data = inputs[0]
    if data.size != rows * cols:
        raise ValueError(f"input holds {data.size} words, shape {rows}x{cols} needs {rows * cols}")
    return data.reshape(rows, cols).T.reshape(-1)


def ptrans_kernel(kernel_id: int = 0, ns_per_element: float = PTRANS_NS_PER_ELEMENT) -> KernelSlot:
    """Transpose a row-major ``rows x cols`` block of 64-bit words."""

    def compute_time(inputs, param):
        rows, cols = unpack_shape(param)
        return rows * cols * ns_per_element * 1e-9

    return KernelSlot(kernel_id, 2, _ptrans, name="ptrans", compute_time=compute_time)


def _negate(inputs, param):
    return (~inputs[0]).astype(np.uint64)


def invert_kernel(kernel_id: int = 1) -> KernelSlot:
    """Bitwise NOT of every word; a second cheap kernel for multi-slot tests."""
    return KernelSlot(kernel_id, 2, _negate, name="invert")


KERNELS = {"identity": identity_kernel, "ptrans": ptrans_kernel, "invert": invert_kernel}
