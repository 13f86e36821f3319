"""Operation counters.

Ops in this package report multiply-accumulates, elementwise work and temporary
buffer sizes to whichever :class:`Counter` is active in the current context.
With no active counter every hook is a no-op, and hooks never touch values, so
instrumented and plain runs are bit-identical.

Accounting rules:

* matmul ``(N, K) x (K, M)`` counts ``N*K*M`` MACs (times the batch size);
* conv counts ``c_out * c_in/groups * kh * kw * h_out * w_out`` per batch item;
* softmax, activations, adds and scaling are ``elementwise`` (element count);
* denominators of normalised linear attention (``phi(q) . z``) go to ``norm``;
* temporaries under 1024 elements are exempt from allocation tracking.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict
from dataclasses import dataclass, field

ALLOC_EXEMPT = 1024

_active: contextvars.ContextVar = contextvars.ContextVar("ucan_counter", default=None)
_scope: contextvars.ContextVar = contextvars.ContextVar("ucan_scope", default=())

_KINDS = ("matmul", "conv", "elementwise", "norm")


@dataclass
class MacReport:
    matmul: int = 0
    conv: int = 0
    elementwise: int = 0
    norm: int = 0
    peak_temp: int = 0
    max_buffer: int = 0
    guard_triggers: int = 0
    by_scope: dict = field(default_factory=dict)
    buffer_shapes: set = field(default_factory=set)

    @property
    def macs(self) -> int:
        """MACs of matmuls and convolutions (the figure MAC formulas count)."""
        return self.matmul + self.conv

    def scoped(self, prefix: str, kinds=("matmul", "conv")) -> int:
        """Sum the given kinds over every scope path starting with ``prefix``."""
        total = 0
        for path, counts in self.by_scope.items():
            if path == prefix or path.startswith(prefix + "/"):
                total += sum(counts.get(k, 0) for k in kinds)
        return total

    def as_dict(self) -> dict:
        return {
            "matmul_macs": self.matmul,
            "conv_macs": self.conv,
            "total_macs": self.macs,
            "elementwise_ops": self.elementwise,
            "norm_macs": self.norm,
            "peak_temp_elements": self.peak_temp,
            "guard_triggers": self.guard_triggers,
        }


class Counter:
    def __init__(self):
        self.counts = dict.fromkeys(_KINDS, 0)
        self.by_scope = defaultdict(lambda: dict.fromkeys(_KINDS, 0))
        self.live = 0
        self.peak = 0
        self.max_buffer = 0
        self.shapes = set()
        self.guard = 0

    def add(self, kind, n):
        n = int(n)
        self.counts[kind] += n
        self.by_scope["/".join(_scope.get())][kind] += n

    def report(self) -> MacReport:
        return MacReport(
            matmul=self.counts["matmul"],
            conv=self.counts["conv"],
            elementwise=self.counts["elementwise"],
            norm=self.counts["norm"],
            peak_temp=self.peak,
            max_buffer=self.max_buffer,
            guard_triggers=self.guard,
            by_scope={k: dict(v) for k, v in self.by_scope.items()},
            buffer_shapes=set(self.shapes),
        )


@contextlib.contextmanager
def counting():
    """Activate a fresh counter; yields a callable returning the report so far."""
    counter = Counter()
    token = _active.set(counter)
    try:
        yield counter.report
    finally:
        _active.reset(token)


@contextlib.contextmanager
def scope(name: str):
    token = _scope.set(_scope.get() + (name,))
    try:
        yield
    finally:
        _scope.reset(token)


def count_macs(fn, *args, **kwargs) -> MacReport:
    """Run ``fn`` under a fresh counter and return its report."""
    with counting() as report:
        fn(*args, **kwargs)
        return report()


def active() -> bool:
    return _active.get() is not None


def matmul(n, k, m, batch=1):
    c = _active.get()
    if c is not None:
        c.add("matmul", batch * n * k * m)


def conv(n):
    c = _active.get()
    if c is not None:
        c.add("conv", n)


def elementwise(n):
    c = _active.get()
    if c is not None:
        c.add("elementwise", n)


def norm(n):
    c = _active.get()
    if c is not None:
        c.add("norm", n)


def guard(n=1):
    c = _active.get()
    if c is not None:
        c.guard += int(n)


def alloc(shape):
    """Register a live temporary buffer of ``shape``."""
    c = _active.get()
    if c is None:
        return
    size = 1
    for s in shape:
        size *= int(s)
    if size < ALLOC_EXEMPT:
        return
    c.live += size
    c.peak = max(c.peak, c.live)
    c.max_buffer = max(c.max_buffer, size)
    c.shapes.add(tuple(int(s) for s in shape))


def release(shape):
    c = _active.get()
    if c is None:
        return
    size = 1
    for s in shape:
        size *= int(s)
    if size >= ALLOC_EXEMPT:
        c.live -= size


@contextlib.contextmanager
def temp(shape):
    alloc(shape)
    try:
        yield
    finally:
        release(shape)
