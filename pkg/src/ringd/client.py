"""Blocking bus client for tools and remote services.

A background thread reads the socket and splits traffic: EV frames go to
per-channel subscription queues, everything else answers the one request
in flight. Values come back as WireValue; use as_float/as_vector/as_text
(the wire does not tag kinds, the caller knows what it asked for).
"""

from __future__ import annotations

import queue
import socket
import threading
from dataclasses import dataclass

import numpy as np

from . import wire
from .errors import BusConnectionError, ProtocolError
from .values import OK, ChannelMeta, format_value, parse_float

_EOF = object()


@dataclass
class WireValue:
    name: str
    timestamp: float
    status: str
    payload: str

    def as_float(self) -> float:
        return parse_float(self.payload)

    def as_vector(self) -> np.ndarray:
        return np.array([parse_float(t) for t in self.payload.split()], dtype=np.float64)

    def as_text(self) -> str:
        return self.payload


class RemoteSubscription:
    """Monitor events for one channel, oldest first."""

    def __init__(self, client, name):
        self.client = client
        self.name = name
        self.queue: queue.Queue = queue.Queue()

    def get(self, timeout: float = 10.0) -> WireValue:
        ev = self.queue.get(timeout=timeout)
        if ev is _EOF:
            raise BusConnectionError("connection closed")
        return ev

    def drain(self) -> list[WireValue]:
        out = []
        while True:
            try:
                ev = self.queue.get_nowait()
            except queue.Empty:
                return out
            if ev is not _EOF:
                out.append(ev)

    def cancel(self):
        self.client.unmonitor(self.name)


class BusClient:
    """One TCP connection to the bus; safe to share between threads."""

    def __init__(self, addr: str | None = None, timeout: float = 10.0):
        host, port = wire.resolve_addr(addr)
        try:
            self.sock = socket.create_connection((host, port), timeout=5.0)
        except OSError as exc:
            raise BusConnectionError(f"cannot reach bus at {host}:{port}: {exc}") from None
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(None)
        self.timeout = timeout
        self._rfile = self.sock.makefile("r", encoding="utf-8", newline="\n")
        self._wlock = threading.Lock()
        self._req_lock = threading.Lock()
        self._replies: queue.Queue = queue.Queue()
        self._subs: dict[str, RemoteSubscription] = {}
        self._subs_lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop,
                                        name="ringd-client-rd", daemon=True)
        self._reader.start()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- socket plumbing --------------------------------------------------

    def _read_loop(self):
        try:
            while True:
                line = self._rfile.readline()
                if not line:
                    break
                line = line.rstrip("\r\n")
                if not line:
                    continue
                verb, _, rest = line.partition(" ")
                if verb == "EV":
                    name, ts, status, payload = wire.parse_sample(rest)
                    with self._subs_lock:
                        sub = self._subs.get(name)
                    if sub is not None:
                        sub.queue.put(WireValue(name, ts, status, payload))
                elif verb == "CHANNELS":
                    names = [self._rfile.readline().rstrip("\r\n")
                             for _ in range(int(rest))]
                    self._replies.put(("CHANNELS", names))
                else:
                    self._replies.put((verb, rest))
        except (OSError, ValueError):
            pass
        finally:
            self._shutdown()

    def _shutdown(self):
        if self._closed:
            return
        self._closed = True
        self._replies.put(_EOF)
        with self._subs_lock:
            subs = list(self._subs.values())
            self._subs.clear()
        for sub in subs:
            sub.queue.put(_EOF)
        try:
            self.sock.close()
        except OSError:
            pass

    def close(self):
        self._shutdown()

    def _request(self, frame: str):
        with self._req_lock:
            if self._closed:
                raise BusConnectionError("connection closed")
            with self._wlock:
                self.sock.sendall((frame + "\n").encode("utf-8"))
            reply = self._replies.get(timeout=self.timeout)
        if reply is _EOF:
            raise BusConnectionError("connection closed")
        verb, rest = reply
        if verb == "ERR":
            name, _, reason = rest.partition(" ")
            raise wire.error_for(reason.strip(), f"{name}: {reason}")
        return verb, rest

    # -- channel API ------------------------------------------------------

    def get(self, name: str) -> WireValue:
        verb, rest = self._request(f"GET {name}")
        if verb != "VAL":
            raise ProtocolError(f"expected VAL, got {verb}")
        rname, ts, status, payload = wire.parse_sample(rest)
        return WireValue(rname, ts, status, payload)

    def get_float(self, name: str) -> float:
        return self.get(name).as_float()

    def get_vector(self, name: str) -> np.ndarray:
        return self.get(name).as_vector()

    def get_text(self, name: str) -> str:
        return self.get(name).as_text()

    def put(self, name: str, value, timestamp: float | None = None, status: str = OK):
        frame = wire.format_put(name, format_value(value), timestamp, status)
        verb, _ = self._request(frame)
        if verb != "OK":
            raise ProtocolError(f"expected OK, got {verb}")

    def put_payload(self, name: str, payload: str):
        """Put a pre-formatted value payload verbatim (snapshot restore)."""
        verb, _ = self._request(wire.format_put(name, payload))
        if verb != "OK":
            raise ProtocolError(f"expected OK, got {verb}")

    def monitor(self, name: str) -> RemoteSubscription:
        with self._subs_lock:
            sub = self._subs.get(name)
            if sub is not None:
                return sub
            sub = RemoteSubscription(self, name)
            self._subs[name] = sub
        try:
            self._request(f"MON {name}")
        except Exception:
            with self._subs_lock:
                self._subs.pop(name, None)
            raise
        return sub

    def unmonitor(self, name: str):
        with self._subs_lock:
            self._subs.pop(name, None)
        if not self._closed:
            self._request(f"UNMON {name}")

    def list(self, pattern: str | None = None) -> list[str]:
        frame = f"LIST {pattern}" if pattern else "LIST"
        verb, names = self._request(frame)
        if verb != "CHANNELS":
            raise ProtocolError(f"expected CHANNELS, got {verb}")
        return names

    def new_channel(self, name: str, meta: ChannelMeta | None = None,
                    initial=None, **meta_kwargs):
        """Create (or re-attach to) a channel owned by this connection."""
        if meta is None:
            meta = ChannelMeta(**meta_kwargs)
        if isinstance(initial, str):
            meta.text = True
        self._request(wire.format_new(name, meta))
        if initial is not None:
            self.put(name, initial)

    def __contains__(self, name: str) -> bool:
        try:
            self.get(name)
            return True
        except Exception:
            return False
