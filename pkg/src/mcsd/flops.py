"""Arithmetic-operation tally for decode step paths."""

from __future__ import annotations

import threading

_local = threading.local()


class FlopCounter:
    """Counts floating-point operations reported by instrumented code while active."""

    def __init__(self) -> None:
        self.flops = 0

    def __enter__(self) -> "FlopCounter":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)


def tally(n: int) -> None:
    stack = getattr(_local, "stack", None)
    if stack:
        for counter in stack:
            counter.flops += int(n)


def matmul_flops(a_shape, b_shape) -> int:
    """Multiply-add count (x2) for ``a @ b`` with broadcast batch dims."""
    m, k = a_shape[-2], a_shape[-1]
    n = b_shape[-1]
    batch = 1
    for d in (a_shape[:-2] if len(a_shape) >= len(b_shape) else b_shape[:-2]):
        batch *= d
    return 2 * batch * m * k * n
