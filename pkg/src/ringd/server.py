"""TCP front end for a SoftBus.

One reader thread per client handles requests; a writer thread drains a
bounded outbound queue so monitor callbacks never block a put. A client
whose queue backs up past MAX_PENDING frames is dropped.
"""

from __future__ import annotations

import queue
import socket
import threading

from . import wire
from .bus import SoftBus
from .errors import BindFailure, ProtocolError, RingdError, UnknownChannel
from .values import parse_payload

MAX_PENDING = 10000

_CLOSE = None  # writer-queue sentinel


class _ClientConn:
    def __init__(self, server, conn: socket.socket, peer):
        self.server = server
        self.bus: SoftBus = server.bus
        self.conn = conn
        self.peer = peer
        self.out: queue.Queue = queue.Queue(maxsize=MAX_PENDING)
        self.subs = {}          # name -> bus Subscription
        self.owned = set()      # names created via NEW on this connection
        self.dead = False
        self.writer = threading.Thread(
            target=self._write_loop, name=f"ringd-wr-{peer}", daemon=True)
        self.reader = threading.Thread(
            target=self._read_loop, name=f"ringd-rd-{peer}", daemon=True)

    def start(self):
        self.writer.start()
        self.reader.start()

    # -- outbound ---------------------------------------------------------

    def send(self, frame: str):
        if self.dead:
            return
        try:
            self.out.put_nowait(frame)
        except queue.Full:
            self.drop()

    def _write_loop(self):
        try:
            while True:
                frame = self.out.get()
                if frame is _CLOSE:
                    break
                self.conn.sendall((frame + "\n").encode("utf-8"))
        except OSError:
            pass
        finally:
            self.drop()

    # -- inbound ----------------------------------------------------------

    def _read_loop(self):
        try:
            rfile = self.conn.makefile("r", encoding="utf-8", newline="\n")
            for line in rfile:
                line = line.rstrip("\r\n")
                if not line:
                    continue
                self._handle(line)
                if self.dead:
                    break
        except OSError:
            pass
        finally:
            self.drop()

    def _handle(self, line: str):
        name = "-"
        try:
            req = wire.parse_request(line)
            name = req.name or "-"
            getattr(self, "_do_" + req.verb.lower())(req)
        except RingdError as exc:
            self.send(f"ERR {name} {exc.reason}")
        except Exception:
            self.send(f"ERR {name} {ProtocolError.reason}")

    def _do_get(self, req):
        tv = self.bus.get(req.name)
        self.send(wire.format_sample("VAL", req.name, tv))

    def _do_put(self, req):
        meta = self.bus.meta(req.name)
        value = parse_payload(req.payload, meta)
        if req.name in self.owned:
            self.bus._channel(req.name).put(value, req.timestamp, req.status)
        else:
            self.bus.put(req.name, value, req.timestamp, req.status)
        self.send("OK")

    def _do_mon(self, req):
        if req.name in self.subs:
            self.send("OK")
            return
        if req.name not in self.bus:
            raise UnknownChannel(req.name)
        self.send("OK")
        # registration and the initial event happen atomically in the bus,
        # so the first EV always follows the OK
        self.subs[req.name] = self.bus.monitor(
            req.name, lambda n, tv: self.send(wire.format_sample("EV", n, tv)))

    def _do_unmon(self, req):
        sub = self.subs.pop(req.name, None)
        if sub is not None:
            sub.cancel()
        self.send("OK")

    def _do_list(self, req):
        names = self.bus.list(req.pattern)
        self.send("\n".join([f"CHANNELS {len(names)}"] + names))

    def _do_new(self, req):
        meta = wire.meta_for_kind(req.kind, req.read_only)
        self.bus.ensure_channel(req.name, meta)
        self.owned.add(req.name)
        self.send("OK")

    # -- teardown ---------------------------------------------------------

    def drop(self):
        if self.dead:
            return
        self.dead = True
        subs = list(self.subs.values())
        self.subs.clear()
        if subs:
            # drop can run inline inside a put callback that holds a channel
            # lock; cancel on a helper thread to avoid taking other locks here
            threading.Thread(target=lambda: [s.cancel() for s in subs],
                             daemon=True).start()
        try:
            self.out.put_nowait(_CLOSE)
        except queue.Full:
            pass
        try:
            self.conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.conn.close()
        except OSError:
            pass
        self.server._forget(self)


class WireServer:
    """Serve a SoftBus on a TCP endpoint. port=0 picks a free port."""

    def __init__(self, bus: SoftBus, host: str = wire.DEFAULT_HOST,
                 port: int = wire.DEFAULT_PORT):
        self.bus = bus
        try:
            self._srv = socket.create_server((host, port))
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from None
        self.host, self.port = self._srv.getsockname()[:2]
        self._clients: set[_ClientConn] = set()
        self._lock = threading.Lock()
        self._stopping = False
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="ringd-accept", daemon=True)

    @property
    def addr(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self):
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while not self._stopping:
            try:
                conn, peer = self._srv.accept()
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            client = _ClientConn(self, conn, peer)
            with self._lock:
                self._clients.add(client)
            client.start()

    def _forget(self, client):
        with self._lock:
            self._clients.discard(client)

    def stop(self):
        self._stopping = True
        try:
            self._srv.close()
        except OSError:
            pass
        with self._lock:
            clients = list(self._clients)
        for c in clients:
            c.drop()

    def serve_forever(self):
        self.start()
        self._accept_thread.join()
