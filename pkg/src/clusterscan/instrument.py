"""Runtime operation counter.

Primitive ops report multiply-accumulates and transcendental evaluations here
while they execute. Nothing is recorded unless a :class:`RuntimeCounter` is
active, so the hooks cost one attribute lookup in normal use.

Counting convention (shared with the analytic ledger in :mod:`clusterscan.costs`):

* ``macs``: contractions only (matmul, convolution, the selective-scan kernel).
* ``transcendentals``: one per output element of exp, log, sqrt, div, sigmoid,
  silu and softplus.
* FLOPs = 2 * macs + 4 * transcendentals.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager

_local = threading.local()


def _counter():
    return getattr(_local, "counter", None)


class RuntimeCounter:
    """Accumulates per-scope op counts during an instrumented forward pass."""

    def __init__(self):
        self.macs = defaultdict(int)
        self.transcendentals = defaultdict(int)
        self._path = []

    @property
    def path(self) -> str:
        return ".".join(self._path)

    def __enter__(self):
        if _counter() is not None:
            raise RuntimeError("a RuntimeCounter is already active on this thread")
        _local.counter = self
        return self

    def __exit__(self, *exc):
        _local.counter = None
        return False

    def total_macs(self) -> int:
        return sum(self.macs.values())

    def total_transcendentals(self) -> int:
        return sum(self.transcendentals.values())

    def entries(self) -> dict:
        keys = set(self.macs) | set(self.transcendentals)
        return {k: (self.macs.get(k, 0), self.transcendentals.get(k, 0)) for k in keys}


def add_macs(n: int) -> None:
    c = _counter()
    if c is not None and n:
        c.macs[c.path] += int(n)


def add_transcendentals(n: int) -> None:
    c = _counter()
    if c is not None and n:
        c.transcendentals[c.path] += int(n)


@contextmanager
def scope(name: str):
    """Name the ops executed inside the block (joined with dots when nested)."""
    c = _counter()
    if c is None:
        yield
        return
    c._path.append(name)
    try:
        yield
    finally:
        c._path.pop()
