"""Beam lifetime from the measured current decay.

Four estimators with different robustness/accuracy trade-offs run on the
same sample window: a two-point secant, a log-linear fit, a nonlinear
exponential fit and a median of instantaneous pair estimates. The service
subscribes to the beam current channel and republishes every estimate, with
all calculation parameters themselves living in channels so generic tools
can inspect and change them.
"""

from __future__ import annotations

import queue
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .client import BusClient
from .errors import BusConnectionError, InsufficientData, NonPositiveCurrent
from .values import INVALID, OK, ChannelMeta

CURRENT_CHANNEL = "ARIDI-BEAM:CURRENT"
RESULT_CHANNELS = {
    "TWOPOINT": "LIFETIME:TWOPOINT",
    "LOGFIT": "LIFETIME:LOGFIT",
    "EXPFIT": "LIFETIME:EXPFIT",
    "MEDFILT": "LIFETIME:MEDFILT",
}
SPIKE_FACTOR = 5.0  # positive jump > factor * recent rms step clears the window
MIN_WINDOW_DECAY = 1e-12  # span/tau below this is roundoff, not decay


@dataclass
class LifetimeResult:
    tau: float       # [h]
    valid: bool
    algorithm: str


class SampleWindow:
    """Ring buffer of (t [s], I [mA]) with strictly increasing timestamps."""

    def __init__(self, capacity: int = 30):
        if capacity < 2:
            raise ValueError("capacity must be >= 2")
        self._buf: deque = deque(maxlen=capacity)

    @property
    def capacity(self) -> int:
        return self._buf.maxlen

    def resize(self, capacity: int):
        if capacity < 2:
            raise ValueError("capacity must be >= 2")
        if capacity != self._buf.maxlen:
            keep = list(self._buf)[-capacity:]
            self._buf = deque(keep, maxlen=capacity)

    def append(self, t: float, i: float) -> bool:
        """Add a sample; silently drops out-of-order timestamps."""
        if self._buf and t <= self._buf[-1][0]:
            return False
        self._buf.append((float(t), float(i)))
        return True

    def clear(self):
        self._buf.clear()

    def __len__(self):
        return len(self._buf)

    def arrays(self):
        """(t, i) as float64 arrays."""
        if not self._buf:
            return np.empty(0), np.empty(0)
        a = np.asarray(self._buf, dtype=float)
        return a[:, 0], a[:, 1]

    def is_spike(self, i_new: float) -> bool:
        """True when i_new jumps up by more than SPIKE_FACTOR * rms step."""
        if len(self._buf) < 3:
            return False
        t, i = self.arrays()
        jump = i_new - i[-1]
        if jump <= 0:
            return False
        rms = float(np.sqrt(np.mean(np.diff(i) ** 2)))
        return jump > SPIKE_FACTOR * rms


def _need(window: SampleWindow, n: int):
    if len(window) < n:
        raise InsufficientData(f"need {n} samples, have {len(window)}")


def lt_twopoint(window: SampleWindow) -> LifetimeResult:
    """Secant through the window endpoints: tau = -I dt/dI."""
    _need(window, 2)
    t, i = window.arrays()
    if i[-1] >= i[0] or i[-1] <= 0:
        return LifetimeResult(0.0, False, "TWOPOINT")
    tau_s = -i[-1] * (t[-1] - t[0]) / (i[-1] - i[0])
    return LifetimeResult(tau_s / 3600.0, True, "TWOPOINT")


def lt_logfit(window: SampleWindow) -> LifetimeResult:
    """Least-squares line through ln I vs t; tau = -1/slope."""
    _need(window, 3)
    t, i = window.arrays()
    if np.any(i <= 0):
        raise NonPositiveCurrent("log fit needs I > 0 everywhere")
    slope = np.polyfit(t, np.log(i), 1)[0]
    if slope >= 0 or (t[-1] - t[0]) * -slope < MIN_WINDOW_DECAY:
        return LifetimeResult(0.0, False, "LOGFIT")
    return LifetimeResult(-1.0 / slope / 3600.0, True, "LOGFIT")


def lt_expfit(window: SampleWindow) -> LifetimeResult:
    """Gauss-Newton fit of I0 exp(-t/tau), seeded from the log fit."""
    _need(window, 3)
    t, i = window.arrays()
    if np.any(i <= 0):
        return LifetimeResult(0.0, False, "EXPFIT")
    coef = np.polyfit(t, np.log(i), 1)
    if coef[0] >= 0:
        return LifetimeResult(0.0, False, "EXPFIT")
    tau = -1.0 / coef[0]  # [s]
    t0 = t - t[0]
    i0 = float(np.exp(np.polyval(coef, t[0])))  # fit amplitude at t[0]
    for _ in range(25):
        e = np.exp(-t0 / tau)
        f = i0 * e
        jac = np.column_stack([e, f * t0 / tau**2])
        try:
            step = np.linalg.lstsq(jac, i - f, rcond=None)[0]
        except np.linalg.LinAlgError:
            return LifetimeResult(0.0, False, "EXPFIT")
        i0 += step[0]
        tau += step[1]
        if tau <= 0 or not np.isfinite(tau):
            return LifetimeResult(0.0, False, "EXPFIT")
        if abs(step[1]) / tau < 1e-10:
            if (t[-1] - t[0]) / tau < MIN_WINDOW_DECAY:
                return LifetimeResult(0.0, False, "EXPFIT")
            return LifetimeResult(tau / 3600.0, True, "EXPFIT")
    return LifetimeResult(0.0, False, "EXPFIT")


def lt_medfilt(window: SampleWindow) -> LifetimeResult:
    """Median of per-pair instantaneous estimates; robust to one outlier."""
    _need(window, 5)
    t, i = window.arrays()
    ibar = 0.5 * (i[1:] + i[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        tau_k = -ibar * np.diff(t) / np.diff(i)
    med = float(np.median(tau_k))
    if not np.isfinite(med) or med <= 0:
        return LifetimeResult(0.0, False, "MEDFILT")
    return LifetimeResult(med / 3600.0, True, "MEDFILT")


ALGORITHMS = {
    "TWOPOINT": lt_twopoint,
    "LOGFIT": lt_logfit,
    "EXPFIT": lt_expfit,
    "MEDFILT": lt_medfilt,
}


def evaluate_all(window: SampleWindow) -> dict:
    """Run every algorithm, mapping errors onto invalid results."""
    out = {}
    for key, fn in ALGORITHMS.items():
        try:
            out[key] = fn(window)
        except (InsufficientData, NonPositiveCurrent):
            out[key] = LifetimeResult(0.0, False, key)
    return out


class LifetimeEngine:
    """Bus service: beam current in, four lifetime channels out."""

    def __init__(self, addr: str | None = None, window: int = 30):
        self.addr = addr
        self.window = SampleWindow(window)
        self._last = {key: 0.0 for key in ALGORITHMS}
        self._stop = threading.Event()

    def stop(self):
        self._stop.set()

    # -- pure event handling (testable without a bus) ----------------------

    def handle_sample(self, t: float, i: float, enabled: bool = True,
                      capacity: int | None = None) -> dict | None:
        """Feed one current sample; returns results or None when disabled."""
        if capacity is not None and capacity != self.window.capacity:
            self.window.resize(capacity)
        if not enabled:
            return None
        if self.window.is_spike(i):
            self.window.clear()
        self.window.append(t, i)
        results = evaluate_all(self.window)
        for key, res in results.items():
            if res.valid:
                self._last[key] = res.tau
        return results

    # -- bus plumbing -------------------------------------------------------

    def _publish(self, client, ts, results):
        for key, name in RESULT_CHANNELS.items():
            if results is None:
                client.put(name, self._last[key], timestamp=ts, status=INVALID)
                continue
            res = results[key]
            status = OK if res.valid else INVALID
            value = res.tau if res.valid else self._last[key]
            client.put(name, value, timestamp=ts, status=status)

    def _serve(self, client: BusClient):
        h = ChannelMeta(units="h", writable=False)
        for name in RESULT_CHANNELS.values():
            client.new_channel(name, h)
            client.put(name, 0.0, status=INVALID)
        client.new_channel("LIFETIME:WINDOW-N", ChannelMeta(), initial=float(self.window.capacity))
        client.new_channel("LIFETIME:ENABLE", ChannelMeta(), initial=1.0)
        sub = client.monitor(CURRENT_CHANNEL)
        while not self._stop.is_set():
            try:
                ev = sub.get(timeout=0.2)
            except queue.Empty:
                continue
            capacity = max(2, int(client.get_float("LIFETIME:WINDOW-N")))
            enabled = client.get_float("LIFETIME:ENABLE") != 0.0
            results = self.handle_sample(ev.timestamp, ev.as_float(),
                                         enabled=enabled, capacity=capacity)
            self._publish(client, ev.timestamp, results)

    def run(self):
        """Serve until stop(); reconnects with backoff, window cleared."""
        backoff = 0.5
        while not self._stop.is_set():
            try:
                with BusClient(self.addr) as client:
                    backoff = 0.5
                    self._serve(client)
            except (BusConnectionError, OSError):
                self.window.clear()
                if self._stop.wait(backoff):
                    return
                backoff = min(backoff * 2.0, 10.0)
