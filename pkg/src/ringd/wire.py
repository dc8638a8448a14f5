"""Line framing for the bus TCP protocol.

UTF-8, newline terminated, one frame per line:

  client->server:
    GET <name>
    PUT <name> [@<ts>] [!INVALID] <value...>
    MON <name>
    UNMON <name>
    LIST [<glob>]
    NEW <name> <kind> [ro]          kind: 0 scalar | <n> vector | text
  server->client:
    VAL <name> <ts> [!INVALID] <value...>
    EV <name> <ts> [!INVALID] <value...>
    OK
    ERR <name|-> <reason>
    CHANNELS <n>   followed by n name lines

Vectors are space-separated floats, shortest round-trip decimals. Text
payloads are the raw rest of the line (labels, no leading @/! tokens).
NEW makes the issuing connection the channel owner: owner puts bypass the
read-only flag, so a remote service can publish its own telemetry.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ProtocolError, RingdError
from .values import (
    INVALID,
    OK,
    STATUS_TOKEN,
    ChannelMeta,
    TimedValue,
    format_float,
    parse_float,
    split_status,
)

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 5064
ENV_VAR = "RINGD_BUS_ADDR"

REQUEST_VERBS = ("GET", "PUT", "MON", "UNMON", "LIST", "NEW")


def resolve_addr(flag: str | None = None) -> tuple[str, int]:
    """Bus endpoint: --bus flag beats RINGD_BUS_ADDR beats the default."""
    spec = flag or os.environ.get(ENV_VAR) or f"{DEFAULT_HOST}:{DEFAULT_PORT}"
    host, sep, port = spec.rpartition(":")
    if not sep:
        host, port = spec, str(DEFAULT_PORT)
    if not host:
        host = DEFAULT_HOST
    try:
        return host, int(port)
    except ValueError:
        raise ProtocolError(f"bad bus address: {spec!r}") from None


def _reason_map() -> dict[str, type]:
    out = {}
    stack = [RingdError]
    while stack:
        cls = stack.pop()
        out.setdefault(cls.reason, cls)
        stack.extend(cls.__subclasses__())
    return out


REASON_TO_ERROR = _reason_map()


def error_for(reason: str, detail: str) -> RingdError:
    return REASON_TO_ERROR.get(reason, RingdError)(detail)


@dataclass
class Request:
    verb: str
    name: str = ""
    payload: str = ""       # PUT value text (status already split off)
    timestamp: float | None = None
    status: str = OK
    pattern: str | None = None   # LIST
    kind: str = ""               # NEW
    read_only: bool = False      # NEW


def parse_request(line: str) -> Request:
    line = line.rstrip("\r\n")
    head = line.split(maxsplit=1)
    if not head:
        raise ProtocolError("empty line")
    verb = head[0]
    rest = head[1] if len(head) > 1 else ""
    if verb not in REQUEST_VERBS:
        raise ProtocolError(f"unknown verb {verb!r}")
    if verb == "LIST":
        return Request(verb, pattern=rest.strip() or None)
    if not rest:
        raise ProtocolError(f"{verb} needs a channel name")
    parts = rest.split(maxsplit=1)
    name = parts[0]
    tail = parts[1] if len(parts) > 1 else ""
    if verb in ("GET", "MON", "UNMON"):
        if tail:
            raise ProtocolError(f"{verb} takes only a name")
        return Request(verb, name)
    if verb == "NEW":
        toks = tail.split()
        if not toks:
            raise ProtocolError("NEW needs a kind")
        kind = toks[0]
        flags = toks[1:]
        if kind != "text":
            try:
                n = int(kind)
            except ValueError:
                raise ProtocolError(f"bad kind {kind!r}") from None
            if n < 0:
                raise ProtocolError(f"bad kind {kind!r}")
        if any(f != "ro" for f in flags):
            raise ProtocolError("NEW flags: only 'ro'")
        return Request(verb, name, kind=kind, read_only="ro" in flags)
    # PUT
    ts = None
    if tail.startswith("@"):
        tok, _, tail = tail.partition(" ")
        ts = parse_float(tok[1:])
    status, payload = split_status(tail)
    return Request(verb, name, payload=payload, timestamp=ts, status=status)


def format_put(name, value_text, timestamp=None, status=OK) -> str:
    parts = ["PUT", name]
    if timestamp is not None:
        parts.append("@" + format_float(timestamp))
    if status == INVALID:
        parts.append(STATUS_TOKEN)
    if value_text:
        parts.append(value_text)
    return " ".join(parts)


def format_new(name, meta: ChannelMeta) -> str:
    parts = ["NEW", name, meta.kind_token()]
    if not meta.writable:
        parts.append("ro")
    return " ".join(parts)


def format_sample(prefix: str, name: str, tv: TimedValue) -> str:
    """A VAL or EV frame for one sample."""
    return f"{prefix} {name} {format_float(tv.timestamp)} {tv.format_payload()}".rstrip()


def parse_sample(line: str):
    """(name, ts, status, payload_text) from a VAL/EV frame body."""
    head = line.split(maxsplit=2)
    if len(head) < 2:
        raise ProtocolError(f"short frame: {line!r}")
    name = head[0]
    ts = parse_float(head[1])
    status, payload = split_status(head[2] if len(head) > 2 else "")
    return name, ts, status, payload


def meta_for_kind(kind: str, read_only: bool) -> ChannelMeta:
    if kind == "text":
        return ChannelMeta(writable=not read_only, text=True)
    return ChannelMeta(writable=not read_only, vector_length=int(kind))
