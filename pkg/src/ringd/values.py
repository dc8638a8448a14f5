"""Channel sample values and their text serialization.

A channel value is one of: float64 scalar, fixed-length float64 vector, or
text. Floats are serialized as shortest round-trip decimals (``repr``), so
any finite float64 survives wire frames, snapshot files and archive stores
bit-exactly. nan/inf are rejected at put time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import BadName, ShapeMismatch

OK = "OK"
INVALID = "INVALID"

STATUS_TOKEN = "!INVALID"

_NAME_RE = re.compile(r"^[A-Za-z0-9:_-]+$")
MAX_NAME_LEN = 60


def validate_name(name: str) -> str:
    if not isinstance(name, str) or not _NAME_RE.match(name) or len(name) > MAX_NAME_LEN:
        raise BadName(f"invalid channel name: {name!r}")
    return name


def format_float(x: float) -> str:
    """Shortest decimal that round-trips the float64 exactly."""
    return repr(float(x))


def parse_float(token: str) -> float:
    try:
        x = float(token)
    except ValueError:
        raise ShapeMismatch(f"not a float: {token!r}") from None
    if not math.isfinite(x):
        raise ShapeMismatch(f"non-finite value: {token!r}")
    return x


def format_value(value) -> str:
    """Value payload as it appears after the timestamp in a frame or file line."""
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple, np.ndarray)):
        return " ".join(format_float(v) for v in value)
    return format_float(value)


@dataclass(frozen=True)
class TimedValue:
    """One channel sample: value, timestamp [s since epoch], status."""

    value: float | str | np.ndarray
    timestamp: float | None = None
    status: str = OK

    def format_payload(self) -> str:
        pay = format_value(self.value)
        if self.status == INVALID:
            return f"{STATUS_TOKEN} {pay}" if pay else STATUS_TOKEN
        return pay


@dataclass
class ChannelMeta:
    """Static channel description; vector_length is fixed for the lifetime."""

    units: str = ""
    description: str = ""
    writable: bool = True
    vector_length: int = 0  # 0 for scalar (and for text)
    text: bool = False

    def kind_token(self) -> str:
        """Wire token for the NEW verb: ``text`` or the vector length."""
        return "text" if self.text else str(self.vector_length)


def coerce_value(value, meta: ChannelMeta):
    """Normalize a raw value against channel meta.

    Scalars become float, vectors become read-only float64 arrays of the
    declared length, text stays str. Raises ShapeMismatch on any mismatch
    or non-finite float.
    """
    if meta.text:
        if not isinstance(value, str):
            raise ShapeMismatch("text channel expects a string")
        if "\n" in value or "\r" in value:
            raise ShapeMismatch("text value must be single-line")
        return value
    if isinstance(value, str):
        raise ShapeMismatch("numeric channel got text")
    if meta.vector_length == 0:
        if isinstance(value, (list, tuple, np.ndarray)):
            raise ShapeMismatch("scalar channel got a vector")
        x = float(value)
        if not math.isfinite(x):
            raise ShapeMismatch("non-finite value")
        return x
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != meta.vector_length:
        raise ShapeMismatch(
            f"expected vector of length {meta.vector_length}, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ShapeMismatch("non-finite value in vector")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


def parse_payload(tokens_or_text: str, meta: ChannelMeta):
    """Parse the serialized payload (text after the name/ts fields) per meta."""
    if meta.text:
        return tokens_or_text
    tokens = tokens_or_text.split()
    if meta.vector_length == 0:
        if len(tokens) != 1:
            raise ShapeMismatch(f"scalar channel expects 1 value, got {len(tokens)}")
        return parse_float(tokens[0])
    if len(tokens) != meta.vector_length:
        raise ShapeMismatch(
            f"vector channel expects {meta.vector_length} values, got {len(tokens)}"
        )
    return np.array([parse_float(t) for t in tokens], dtype=np.float64)


def split_status(payload: str) -> tuple[str, str]:
    """Strip an optional leading !INVALID token; returns (status, rest)."""
    if payload == STATUS_TOKEN:
        return INVALID, ""
    if payload.startswith(STATUS_TOKEN + " "):
        return INVALID, payload[len(STATUS_TOKEN) + 1 :]
    return OK, payload


def values_equal(a, b) -> bool:
    """Bitwise equality of channel values (used by tests and tools)."""
    if isinstance(a, str) or isinstance(b, str):
        return a == b
    a_arr = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b_arr = np.atleast_1d(np.asarray(b, dtype=np.float64))
    return a_arr.shape == b_arr.shape and np.array_equal(a_arr, b_arr)
