"""In-process soft-channel bus: named channels with get/put/monitor.

Every service and client integrates through channels; nothing else is
shared. Per-channel operations serialize through the channel lock (the
ordering point), so each subscriber sees events in put order. Monitor
delivery is queue-based and never blocks a put; inline callbacks are for
trusted fast consumers (the wire server) only.
"""

from __future__ import annotations

import fnmatch
import queue
import threading
import time

from .errors import DuplicateName, ReadOnly, ShapeMismatch, UnknownChannel
from .values import OK, ChannelMeta, TimedValue, coerce_value, validate_name


class Subscription:
    """One monitor attachment; events arrive as (name, TimedValue) pairs.

    With a callback, delivery happens inline at the put ordering point: the
    callback must be fast and non-blocking. Without one, consume ``queue``.
    """

    def __init__(self, channel, callback=None):
        self.channel = channel
        self.callback = callback
        self.queue: queue.Queue = queue.Queue()
        self.active = True

    def _deliver(self, name, tv):
        if self.callback is not None:
            try:
                self.callback(name, tv)
            except Exception:
                pass
        else:
            self.queue.put((name, tv))

    def get(self, timeout=5.0):
        """Next (name, TimedValue) event; queue mode only."""
        return self.queue.get(timeout=timeout)

    def cancel(self):
        self.channel._unsubscribe(self)


class Channel:
    """A named soft channel. Holding the object grants owner (privileged) puts."""

    def __init__(self, bus, name, meta: ChannelMeta, initial: TimedValue):
        self.bus = bus
        self.name = name
        self.meta = meta
        # reentrant: an inline callback may cancel its own subscription
        # (wire server dropping a stalled client) while put holds the lock
        self._lock = threading.RLock()
        self._subs: list[Subscription] = []
        value = coerce_value(initial.value, meta)
        ts = initial.timestamp if initial.timestamp is not None else bus.clock()
        self._tv = TimedValue(value, float(ts), initial.status)
        self._put_count = 0

    # -- core ops -------------------------------------------------------

    def get(self) -> TimedValue:
        with self._lock:
            return self._tv

    def put(self, value, timestamp=None, status=OK, _privileged=True):
        """Owner-side put; bypasses the writable flag.

        Timestamps default to bus time; one older than the stored sample is
        clamped to keep per-channel time non-decreasing.
        """
        if not _privileged and not self.meta.writable:
            raise ReadOnly(f"{self.name} is read-only")
        value = coerce_value(value, self.meta)
        with self._lock:
            ts = float(timestamp) if timestamp is not None else self.bus.clock()
            if ts < self._tv.timestamp:
                ts = self._tv.timestamp
            tv = TimedValue(value, ts, status)
            self._tv = tv
            self._put_count += 1
            subs = list(self._subs)
            for sub in subs:
                sub._deliver(self.name, tv)
        return tv

    def monitor(self, callback=None) -> Subscription:
        sub = Subscription(self, callback)
        with self._lock:
            self._subs.append(sub)
            sub._deliver(self.name, self._tv)
        return sub

    def _unsubscribe(self, sub):
        with self._lock:
            sub.active = False
            if sub in self._subs:
                self._subs.remove(sub)

    @property
    def put_count(self) -> int:
        with self._lock:
            return self._put_count


class SoftBus:
    """Registry of channels; safe for concurrent use by services and clients."""

    def __init__(self, clock=time.time):
        self.clock = clock
        self._lock = threading.Lock()
        self._channels: dict[str, Channel] = {}

    def create_channel(self, name, meta: ChannelMeta | None = None, initial=None,
                       **meta_kwargs) -> Channel:
        """Register a channel and return the owner handle.

        ``initial`` may be a TimedValue or a raw value; ``meta`` may be given
        directly or via keyword fields (units=..., vector_length=..., ...).
        """
        validate_name(name)
        if meta is None:
            meta = ChannelMeta(**meta_kwargs)
        if isinstance(initial, str) and not meta.text:
            meta.text = True
        if not isinstance(initial, TimedValue):
            if initial is None:
                initial = "" if meta.text else (
                    [0.0] * meta.vector_length if meta.vector_length else 0.0)
            initial = TimedValue(initial)
        ch = Channel(self, name, meta, initial)
        with self._lock:
            if name in self._channels:
                raise DuplicateName(name)
            self._channels[name] = ch
        return ch

    def ensure_channel(self, name, meta: ChannelMeta | None = None, initial=None,
                       **meta_kwargs) -> Channel:
        """create_channel, or adopt an existing channel with matching shape.

        Lets a restarted service re-attach to its own channels (the wire NEW
        verb maps here). Shape or text-kind mismatch raises ShapeMismatch.
        """
        if meta is None:
            meta = ChannelMeta(**meta_kwargs)
        if isinstance(initial, str):
            meta.text = True
        with self._lock:
            existing = self._channels.get(name)
        if existing is None:
            try:
                return self.create_channel(name, meta, initial)
            except DuplicateName:
                with self._lock:
                    existing = self._channels[name]
        if existing.meta.text != meta.text or existing.meta.vector_length != meta.vector_length:
            raise ShapeMismatch(f"{name}: incompatible existing channel")
        return existing

    def _channel(self, name) -> Channel:
        with self._lock:
            ch = self._channels.get(name)
        if ch is None:
            raise UnknownChannel(name)
        return ch

    def get(self, name) -> TimedValue:
        return self._channel(name).get()

    def put(self, name, value, timestamp=None, status=OK):
        """Client-side put; honors the writable flag."""
        return self._channel(name).put(value, timestamp, status, _privileged=False)

    def monitor(self, name, callback=None) -> Subscription:
        return self._channel(name).monitor(callback)

    def meta(self, name) -> ChannelMeta:
        return self._channel(name).meta

    def put_count(self, name) -> int:
        return self._channel(name).put_count

    def list(self, pattern: str | None = None) -> list[str]:
        with self._lock:
            names = sorted(self._channels)
        if pattern:
            names = [n for n in names if fnmatch.fnmatchcase(n, pattern)]
        return names

    def __contains__(self, name) -> bool:
        with self._lock:
            return name in self._channels
