"""Half-open integer interval sets used for reassembly bookkeeping."""

from __future__ import annotations

import bisect


class IntervalSet:
    """Sorted, non-overlapping, non-adjacent ``[start, end)`` ranges."""

    __slots__ = ("_starts", "_ends")

    def __init__(self):
        self._starts: list[int] = []
        self._ends: list[int] = []

    def add(self, start: int, end: int) -> int:
        """Insert ``[start, end)`` and return how many new points it covered."""
        if end <= start:
            return 0
        starts, ends = self._starts, self._ends
        # fast path: appending right at the end (in-order delivery)
        if starts and start == ends[-1]:
            ends[-1] = end
            return end - start
        if not starts or start > ends[-1]:
            starts.append(start)
            ends.append(end)
            return end - start
        lo = bisect.bisect_left(ends, start)
        hi = bisect.bisect_right(starts, end)
        if lo == hi:
            starts.insert(lo, start)
            ends.insert(lo, end)
            return end - start
        covered_before = sum(min(e, end) - max(s, start) for s, e in zip(starts[lo:hi], ends[lo:hi]) if e > start and s < end)
        new_start = min(start, starts[lo])
        new_end = max(end, ends[hi - 1])
        starts[lo:hi] = [new_start]
        ends[lo:hi] = [new_end]
        return (end - start) - covered_before

    def covers(self, start: int, end: int) -> bool:
        if end <= start:
            return True
        i = bisect.bisect_right(self._starts, start) - 1
        return i >= 0 and self._ends[i] >= end

    def contiguous_prefix(self) -> int:
        """Length of the covered run starting at 0."""
        if self._starts and self._starts[0] == 0:
            return self._ends[0]
        return 0

    def total(self) -> int:
        return sum(e - s for s, e in zip(self._starts, self._ends))

    def gaps(self, start: int, end: int) -> list[tuple[int, int]]:
        out = []
        cur = start
        for s, e in zip(self._starts, self._ends):
            if e <= cur:
                continue
            if s >= end:
                break
            if s > cur:
                out.append((cur, s))
            cur = max(cur, e)
        if cur < end:
            out.append((cur, end))
        return out

    def clear(self) -> None:
        self._starts.clear()
        self._ends.clear()

    def __iter__(self):
        return iter(zip(self._starts, self._ends))

    def __len__(self) -> int:
        return len(self._starts)

    def __repr__(self) -> str:
        return f"IntervalSet({list(self)})"
