"""Channel snapshot files.

A snapshot is an ordered capture of channel values as text, restorable to
reproduce a machine state. The format is line-oriented and bit-exact for
float64 (shortest round-trip decimals):

    --- RINGD SNAPSHOT v1 ---
    # time 2025-03-14T09:26:53+00:00
    # optics d2r55
    ARIDI-QUAD:SET 120.0 121.5 ...
    OPTICS:D-NU-X 0.01
    <END>

``#`` lines after the header are comments; ``# time`` and ``# optics`` are
recognized. Optics and response-matrix files reuse this format with
pseudo-channel names, so one loader serves them all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone

from .errors import BadName, ParseError
from .values import format_value, validate_name

HEADER = "--- RINGD SNAPSHOT v1 ---"
END_MARK = "<END>"


@dataclass
class Snapshot:
    time_iso: str = ""
    optics_name: str | None = None
    entries: list = field(default_factory=list)  # ordered (name, payload text)

    def names(self):
        return [name for name, _ in self.entries]

    def get(self, name, default=None):
        for n, payload in self.entries:
            if n == name:
                return payload
        return default

    def __contains__(self, name):
        return any(n == name for n, _ in self.entries)

    def add(self, name, value):
        """Append a (name, value) pair; value may be float/vector/str."""
        if name in self:
            raise ParseError(f"duplicate snapshot entry {name}")
        self.entries.append((validate_name(name), format_value(value)))


def format_snapshot(snap: Snapshot) -> str:
    t = snap.time_iso or datetime.now(timezone.utc).isoformat(timespec="seconds")
    lines = [HEADER, f"# time {t}"]
    if snap.optics_name:
        lines.append(f"# optics {snap.optics_name}")
    for name, payload in snap.entries:
        lines.append(f"{name} {payload}" if payload else name)
    lines.append(END_MARK)
    return "\n".join(lines) + "\n"


def parse_snapshot(text: str) -> Snapshot:
    lines = text.splitlines()
    if not lines or lines[0] != HEADER:
        raise ParseError(f"not a snapshot file (expected {HEADER!r})", line=1)
    snap = Snapshot()
    seen = set()
    ended = False
    for lineno, line in enumerate(lines[1:], start=2):
        if ended:
            break
        line = line.rstrip("\r")
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("time "):
                snap.time_iso = body[5:].strip()
            elif body.startswith("optics "):
                snap.optics_name = body[7:].strip()
            continue
        if line == END_MARK:
            ended = True
            continue
        name, _, payload = line.partition(" ")
        try:
            validate_name(name)
        except BadName:
            raise ParseError(f"bad channel name {name!r}", line=lineno) from None
        if name in seen:
            raise ParseError(f"duplicate entry {name}", line=lineno)
        seen.add(name)
        snap.entries.append((name, payload))
    if not ended:
        raise ParseError("truncated file: missing <END>", line=len(lines) + 1)
    return snap


def write_snapshot(snap: Snapshot, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_snapshot(snap))


def read_snapshot(path: str) -> Snapshot:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_snapshot(fh.read())


def snapshot_from_bus(client, pattern=None, optics_name=None):
    """Capture matching channels in list order.

    Returns (Snapshot, skipped) where skipped counts channels that vanished
    between listing and reading.
    """
    snap = Snapshot(optics_name=optics_name)
    skipped = 0
    for name in client.list(pattern):
        try:
            snap.entries.append((name, client.get(name).payload))
        except Exception:
            skipped += 1
    return snap, skipped


def restore_to_bus(client, snap: Snapshot):
    """Put every entry in file order; returns (applied, failed)."""
    applied = failed = 0
    for name, payload in snap.entries:
        try:
            client.put_payload(name, payload)
            applied += 1
        except Exception:
            failed += 1
    return applied, failed
