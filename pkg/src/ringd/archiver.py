"""Append-only channel recorder and time-range queries.

Store format is one text file per run, lines `A <t> <name> <value...>`.
Record timestamps are the channel timestamps, so queries share the time
base of the machine (simulated seconds), not the recorder's wall clock.
Plain text keeps the store greppable and crash-tolerant: a torn last
line is skipped and everything before it stays valid.
"""

from __future__ import annotations

import fnmatch
import time
from dataclasses import dataclass

from .client import BusClient
from .errors import BadName, ParseError, ShapeMismatch, UnknownChannel
from .values import (
    OK,
    STATUS_TOKEN,
    format_float,
    parse_float,
    split_status,
    validate_name,
)

RECORD_TAG = "A"
FLUSH_INTERVAL = 1.0   # [s] wall clock
ON_CHANGE = "on-change"
PERIODIC = "periodic"


# -- policy -------------------------------------------------------------------


@dataclass
class PolicyRule:
    pattern: str
    mode: str
    dt: float | None = None  # [s], periodic only

    def __post_init__(self):
        if self.mode not in (ON_CHANGE, PERIODIC):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.mode == PERIODIC and not (self.dt and self.dt > 0):
            raise ValueError("periodic rule needs dt > 0")


@dataclass
class ArchivePolicy:
    rules: list[PolicyRule]

    def match(self, name: str) -> PolicyRule | None:
        for rule in self.rules:
            if fnmatch.fnmatchcase(name, rule.pattern):
                return rule
        return None

    @property
    def patterns(self) -> list[str]:
        return [rule.pattern for rule in self.rules]


def parse_policy(text: str) -> ArchivePolicy:
    """Policy lines: `<glob> on-change` or `<glob> periodic <dt>`."""
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        try:
            if len(fields) == 2 and fields[1] == ON_CHANGE:
                rules.append(PolicyRule(fields[0], ON_CHANGE))
            elif len(fields) == 3 and fields[1] == PERIODIC:
                rules.append(PolicyRule(fields[0], PERIODIC, parse_float(fields[2])))
            else:
                raise ValueError(f"bad policy line: {line!r}")
        except (ValueError, ShapeMismatch) as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return ArchivePolicy(rules)


def load_policy(path) -> ArchivePolicy:
    with open(path, encoding="utf-8") as f:
        return parse_policy(f.read())


# -- store lines ----------------------------------------------------------------


@dataclass
class ArchiveRecord:
    t: float      # [s] channel time
    name: str
    payload: str  # value text, status token stripped
    status: str = OK

    def values(self):
        return [parse_float(tok) for tok in self.payload.split()]


def format_record(t: float, name: str, payload: str) -> str:
    return f"{RECORD_TAG} {format_float(t)} {name} {payload}\n"


def parse_record(line: str) -> ArchiveRecord:
    tag, _, rest = line.partition(" ")
    if tag != RECORD_TAG:
        raise ParseError(f"bad record tag {tag!r}")
    t_tok, _, rest = rest.partition(" ")
    name, _, payload = rest.partition(" ")
    try:
        t = parse_float(t_tok)
        validate_name(name)
    except (ShapeMismatch, BadName) as exc:
        raise ParseError(str(exc)) from None
    if not payload.strip():
        raise ParseError("record has no value")
    status, payload = split_status(payload.strip())
    return ArchiveRecord(t, name, payload, status)


# -- recorder -------------------------------------------------------------------


class Recorder:
    """Single writer appending matched channel events to one store file.

    On-change channels ride monitor subscriptions (initial value plus every
    put); periodic channels are sampled every rule.dt seconds of wall time.
    The recorder never blocks the bus: events queue on the subscription and
    are drained here.
    """

    def __init__(self, addr, policy: ArchivePolicy, store_path,
                 flush_interval=FLUSH_INTERVAL, client=None):
        self.policy = policy
        self.store_path = store_path
        self.flush_interval = float(flush_interval)
        self._client = client if client is not None else BusClient(addr)
        self._owns_client = client is None
        self._file = open(store_path, "a", encoding="utf-8")
        self._subs = {}       # name -> RemoteSubscription
        self._periodic = {}   # name -> [dt, next_due]
        self._last_flush = time.monotonic()
        self.written = 0

        for name in sorted(self._discover()):
            rule = self.policy.match(name)
            if rule is None:
                continue
            if rule.mode == ON_CHANGE:
                self._subs[name] = self._client.monitor(name)
            else:
                self._periodic[name] = [rule.dt, time.monotonic()]

    def _discover(self):
        names = set()
        for pattern in self.policy.patterns:
            names.update(self._client.list(pattern))
        return names

    def _append(self, value):
        payload = value.payload
        if value.status != OK:
            payload = f"{STATUS_TOKEN} {payload}" if payload else STATUS_TOKEN
        self._file.write(format_record(value.timestamp, value.name, payload))
        self.written += 1

    def poll(self):
        """Drain pending events, sample due periodics, flush when due."""
        for sub in self._subs.values():
            for value in sub.drain():
                self._append(value)
        now = time.monotonic()
        for name, slot in self._periodic.items():
            if now >= slot[1]:
                self._append(self._client.get(name))
                slot[1] = now + slot[0]
        if now - self._last_flush >= self.flush_interval:
            self.flush()

    def flush(self):
        self._file.flush()
        self._last_flush = time.monotonic()

    def run(self, stop_event, tick=0.05):
        try:
            while not stop_event.is_set():
                self.poll()
                stop_event.wait(tick)
        finally:
            self.close()

    def close(self):
        for sub in self._subs.values():
            try:
                sub.cancel()
            except Exception:
                pass
        self._subs.clear()
        self._file.flush()
        self._file.close()
        if self._owns_client:
            self._client.close()


def record(addr, policy: ArchivePolicy, store_path, **kw) -> Recorder:
    return Recorder(addr, policy, store_path, **kw)


# -- queries ---------------------------------------------------------------------


def scan_store(store_path, corrupt=None):
    """Yield (offset, ArchiveRecord) per complete, well-formed line.

    Corrupt lines are reported into `corrupt` as (offset, text) and skipped;
    a torn (unterminated) last line is ignored, the file is valid up to it.
    """
    with open(store_path, "rb") as f:
        data = f.read()
    offset = 0
    for raw in data.split(b"\n")[:-1]:  # complete lines only
        try:
            yield offset, parse_record(raw.decode("utf-8"))
        except (ParseError, UnicodeDecodeError):
            if corrupt is not None:
                corrupt.append((offset, raw.decode("utf-8", errors="replace")))
        offset += len(raw) + 1


def query(store_path, name, t0, t1, corrupt=None) -> list[ArchiveRecord]:
    """All records for `name` with t0 <= t <= t1, sorted by time."""
    if t0 > t1:
        raise ValueError(f"query window reversed: {t0} > {t1}")
    seen = False
    out = []
    for _, rec in scan_store(store_path, corrupt):
        if rec.name != name:
            continue
        seen = True
        if t0 <= rec.t <= t1:
            out.append(rec)
    if not seen:
        raise UnknownChannel(f"no records for {name}")
    out.sort(key=lambda rec: rec.t)
    return out


def export_csv(series: list[ArchiveRecord], path, name=None, empty_ok=False):
    """Write the series as CSV: `t,<name>` or `t,v0..vk` for vectors."""
    if not series and not empty_ok:
        raise ValueError("refusing to export an empty series")
    with open(path, "w", encoding="utf-8") as f:
        if not series:
            f.write(f"t,{name}\n" if name else "t\n")
            return
        width = len(series[0].payload.split())
        if any(len(rec.payload.split()) != width for rec in series):
            raise ValueError("series mixes value widths")
        if width == 1:
            f.write(f"t,{series[0].name}\n")
        else:
            f.write("t," + ",".join(f"v{i}" for i in range(width)) + "\n")
        for rec in series:
            f.write(format_float(rec.t) + "," + ",".join(rec.payload.split()) + "\n")
