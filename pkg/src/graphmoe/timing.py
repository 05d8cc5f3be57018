"""Opt-in wall-clock accounting by module name.

Forward code wraps regions in ``with section("attention"):``. When no
:class:`SectionTimer` is active the context manager is a no-op.
"""

from __future__ import annotations

import contextvars
import time
from collections import defaultdict
from contextlib import contextmanager

_current: contextvars.ContextVar["SectionTimer | None"] = contextvars.ContextVar(
    "graphmoe_section_timer", default=None
)


class SectionTimer:
    """Accumulates monotonic-clock seconds per section name.

    Sections do not nest in the accounting: an inner section is charged to
    its own name only, the outer one excludes it.
    """

    def __init__(self):
        self.totals: dict[str, float] = defaultdict(float)
        self._stack: list[list] = []

    def __enter__(self) -> "SectionTimer":
        self._token = _current.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _current.reset(self._token)

    def _push(self, name: str) -> None:
        now = time.perf_counter()
        if self._stack:
            outer = self._stack[-1]
            self.totals[outer[0]] += now - outer[1]
        self._stack.append([name, now])

    def _pop(self) -> None:
        now = time.perf_counter()
        name, start = self._stack.pop()
        self.totals[name] += now - start
        if self._stack:
            self._stack[-1][1] = now


@contextmanager
def section(name: str):
    timer = _current.get()
    if timer is None:
        yield
        return
    timer._push(name)
    try:
        yield
    finally:
        timer._pop()
