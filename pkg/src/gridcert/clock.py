"""Integer UTC-second clocks. Services take a clock so tests can drive time."""

import threading
import time


class SystemClock:
    def now(self) -> int:
        return int(time.time())


class MockClock:
    """A manually advanced clock shared by every simulator in a test."""

    def __init__(self, start: int | None = None):
        self._now = int(time.time()) if start is None else int(start)
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            return self._now

    def advance(self, seconds: int) -> int:
        with self._lock:
            self._now += int(seconds)
            return self._now

    def set(self, timestamp: int) -> None:
        with self._lock:
            self._now = int(timestamp)
