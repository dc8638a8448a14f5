"""Slow orbit feedback.

Reads the BPM orbit, computes corrector kicks through an SVD pseudo-inverse
with a per-singular-value enable mask, and applies them incrementally. For
the horizontal plane the RF frequency joins the 72 correctors as a 73rd
column (dispersion orbit per Hz, weighted), but frequency moves are
quantized to multiples of f_step: the requested setting is applied df plus
the fresh weighted frequency kick, and moves smaller than half a step are
left to the correctors. Under a slow orbit length drift the correctors
soak up the error until the lag exceeds half a step, then the frequency
jumps one step and the correctors relax, giving the classic sawtooth in
the mean kick.
"""

from __future__ import annotations

import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .client import BusClient
from .errors import (
    AllDisabled,
    BadMask,
    BadTransition,
    BusConnectionError,
    ParseError,
    ShapeMismatch,
)
from .snapshot import Snapshot, read_snapshot, write_snapshot
from .values import INVALID, OK, ChannelMeta

STOPPED, PASSIVE, ACTIVE = "STOPPED", "PASSIVE", "ACTIVE"
MODES = (STOPPED, PASSIVE, ACTIVE)
AUTO_CUTOFF = 1e-10     # singular values below w_max * this never contribute
DEFAULT_F_STEP = 10.0   # [Hz]

PLANES = {
    "x": ("OFB", "ARIDI-BPM:X", "ARIDI-COR-X:SET"),
    "y": ("OFBY", "ARIDI-BPM:Y", "ARIDI-COR-Y:SET"),
}
RF_CHANNEL = "ARIDI-RF:DELTA-F"


# -- SVD correction kernel ----------------------------------------------------


@dataclass
class SvdCorrector:
    """Masked pseudo-inverse of the working response matrix."""

    u: np.ndarray          # n_bpm x n_bpm
    w: np.ndarray          # length n_cols, descending, zero-padded past rank
    vt: np.ndarray         # n_cols x n_cols
    mask: np.ndarray       # 0/1 per singular direction, length n_cols
    reference: np.ndarray  # [mm] n_bpm

    @property
    def n_bpm(self):
        return self.u.shape[0]

    @property
    def n_cols(self):
        return self.vt.shape[0]

    def reconstruct(self) -> np.ndarray:
        s = np.zeros((self.n_bpm, self.n_cols))
        k = min(self.n_bpm, self.n_cols)
        s[:k, :k] = np.diag(self.w[:k])
        return self.u @ s @ self.vt

    def effective_mask(self) -> np.ndarray:
        cut = self.w[0] * AUTO_CUTOFF if self.w.size else 0.0
        return (self.mask != 0) & (self.w > cut)

    def set_mask(self, mask):
        mask = np.asarray(mask, dtype=float)
        if mask.shape != (self.n_cols,):
            raise BadMask(f"mask length {mask.size}, want {self.n_cols}")
        self.mask = (mask != 0).astype(float)


def svd_factor(r_work, reference=None) -> SvdCorrector:
    """Factor the working response matrix; all singular directions enabled."""
    r_work = np.asarray(r_work, dtype=float)
    if not np.all(np.isfinite(r_work)):
        raise ShapeMismatch("response matrix contains non-finite entries")
    u, s, vt = np.linalg.svd(r_work, full_matrices=True)
    n_cols = r_work.shape[1]
    w = np.zeros(n_cols)
    w[: s.size] = s
    if reference is None:
        reference = np.zeros(r_work.shape[0])
    return SvdCorrector(u, w, vt, np.ones(n_cols), np.asarray(reference, float))


def compute_correction(corr: SvdCorrector, orbit) -> np.ndarray:
    """Minimum-norm kicks driving (orbit - reference) to zero, masked."""
    orbit = np.asarray(orbit, dtype=float)
    if orbit.shape != (corr.n_bpm,):
        raise ShapeMismatch(f"orbit length {orbit.size}, want {corr.n_bpm}")
    k = min(corr.n_bpm, corr.n_cols)
    eff = corr.effective_mask()
    if not eff[:k].any():
        raise AllDisabled("every singular value is masked")
    t = corr.u.T @ (orbit - corr.reference)
    g = np.zeros(corr.n_cols)
    act = eff[:k]
    g[:k][act] = t[:k][act] / corr.w[:k][act]
    return -(corr.vt.T @ g)


def quantize_frequency(df_target: float, df_applied: float, f_step: float) -> float:
    """Nearest reachable multiple of f_step (round half away from zero)."""
    if f_step <= 0:
        raise ValueError("f_step must be > 0")
    d = df_target - df_applied
    n = math.floor(abs(d) / f_step + 0.5)
    if n == 0:
        return df_applied
    return df_applied + math.copysign(n * f_step, d)


# -- response files -----------------------------------------------------------


@dataclass
class ResponseFile:
    """One plane's response data as stored in a snapshot file."""

    r: np.ndarray                 # [mm/mrad] n_bpm x n_corr
    eta_mm: np.ndarray | None     # [mm]; None for the vertical plane
    alpha_c: float | None
    f0: float | None              # [Hz]

    @property
    def freq_col(self):
        if self.eta_mm is None:
            return None
        return -self.eta_mm / (self.alpha_c * self.f0)


def write_response(path, r, eta_mm=None, alpha_c=None, f0=None):
    snap = Snapshot()
    r = np.asarray(r, dtype=float)
    for i in range(r.shape[0]):
        snap.add(f"OFB:R-ROW-{i}", r[i])
    if eta_mm is not None:
        snap.add("OFB:ETA", np.asarray(eta_mm, dtype=float))
        snap.add("OFB:ALPHA-C", float(alpha_c))
        snap.add("OFB:F0", float(f0))
    write_snapshot(snap, path)


def load_response(path) -> ResponseFile:
    snap = read_snapshot(path)
    rows = []
    while True:
        payload = snap.get(f"OFB:R-ROW-{len(rows)}")
        if payload is None:
            break
        rows.append([float(tok) for tok in payload.split()])
    if not rows:
        raise ParseError("response file has no OFB:R-ROW-<i> entries")
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise ParseError(f"inconsistent response row lengths {sorted(widths)}")
    r = np.asarray(rows, dtype=float)
    eta_payload = snap.get("OFB:ETA")
    if eta_payload is None:
        return ResponseFile(r, None, None, None)
    eta = np.array([float(tok) for tok in eta_payload.split()])
    if eta.size != r.shape[0]:
        raise ParseError(f"eta length {eta.size} does not match {r.shape[0]} rows")
    for key in ("OFB:ALPHA-C", "OFB:F0"):
        if snap.get(key) is None:
            raise ParseError(f"response file lacks {key}")
    return ResponseFile(r, eta, float(snap.get("OFB:ALPHA-C")),
                        float(snap.get("OFB:F0")))


# -- feedback server ------------------------------------------------------------


class OfbServer:
    """Periodic orbit correction loop, configured and observed via channels."""

    def __init__(self, response: ResponseFile, addr=None, plane="x",
                 period=1.0, f_step=DEFAULT_F_STEP, gain=1.0, f_weight=None,
                 reference=None):
        if plane not in PLANES:
            raise ValueError(f"plane must be one of {sorted(PLANES)}")
        self.prefix, self.bpm_channel, self.cor_channel = PLANES[plane]
        self.response = response
        self.addr = addr
        self.mode = STOPPED
        self.period = float(period)   # [s]
        self.f_step = float(f_step)   # [Hz]
        self.gain = float(gain)
        self.iteration = 0
        self.df_applied = 0.0         # [Hz], always a multiple of f_step
        self._stop = threading.Event()
        self._client = None
        self._stale_count = 0
        self._last_bpm_ts = None
        self._last_telemetry = {}

        self.has_freq = response.freq_col is not None
        n_corr = response.r.shape[1]
        self.n_cols = n_corr + 1 if self.has_freq else n_corr
        self.kicks = np.zeros(self.n_cols)  # [mrad]; last entry in weight units
        if self.has_freq:
            # magnet kick pattern equivalent to 1 Hz; its norm sets the
            # auto weight so the frequency column carries most of the
            # dispersive error (share w^2/(1+w^2) = 0.9 at 3x)
            r_disp = np.linalg.solve(response.r, response.freq_col)
            auto = 3.0 / float(np.linalg.norm(r_disp))
            self.f_weight = float(f_weight) if f_weight is not None else auto
        else:
            self.f_weight = 0.0
        self.reference = (np.zeros(response.r.shape[0]) if reference is None
                          else np.asarray(reference, dtype=float))
        self.corrector = self._factor()

    def _factor(self) -> SvdCorrector:
        if self.has_freq:
            col = self.response.freq_col * self.f_weight
            r_work = np.hstack([self.response.r, col[:, None]])
        else:
            r_work = self.response.r
        corr = svd_factor(r_work, self.reference)
        return corr

    # -- configuration ------------------------------------------------------

    def _set_f_step(self, f_step):
        # keep df_applied on the grid: rebase to the nearest multiple of
        # the new step (bookkeeping only, the RF channel is not touched)
        if f_step != self.f_step:
            self.f_step = f_step
            self.df_applied = quantize_frequency(self.df_applied, 0.0, f_step)

    def configure(self, mask=None, f_weight=None, reference=None,
                  period=None, f_step=None, gain=None):
        """Loop settings; matrix-shaping changes require STOPPED."""
        if mask is not None or f_weight is not None or reference is not None:
            if self.mode != STOPPED:
                raise BadTransition("matrix and mask changes require STOPPED")
        if f_weight is not None or reference is not None:
            if f_weight is not None:
                self.f_weight = float(f_weight)
            if reference is not None:
                self.reference = np.asarray(reference, dtype=float)
            old_mask = self.corrector.mask
            self.corrector = self._factor()
            self.corrector.mask = old_mask
        if mask is not None:
            self.corrector.set_mask(mask)
        if period is not None:
            self.period = float(period)
        if f_step is not None:
            if f_step <= 0:
                raise ValueError("f_step must be > 0")
            self._set_f_step(float(f_step))
        if gain is not None:
            self.gain = float(gain)
        self._push_config()

    def start(self, mode):
        if mode not in MODES:
            raise BadTransition(f"unknown mode {mode!r}")
        self.mode = mode
        self._push_config()

    def stop_loop(self):
        self.mode = STOPPED
        self._push_config()

    # -- channels -----------------------------------------------------------

    def _ch(self, tail, sep=":"):
        return f"{self.prefix}{sep}{tail}"

    def connect(self, client=None):
        """Create/adopt all control and telemetry channels."""
        if client is None:
            client = BusClient(self.addr)
        self._client = client
        p = self._ch
        client.new_channel(p("MODE"), ChannelMeta(text=True))
        client.new_channel(p("PERIOD"), ChannelMeta(units="s"))
        client.new_channel(p("SV-MASK"), ChannelMeta(vector_length=self.n_cols))
        client.new_channel(p("F-STEP"), ChannelMeta(units="Hz"))
        client.new_channel(p("GAIN"), ChannelMeta())
        client.new_channel(p("F-WEIGHT"), ChannelMeta())
        tails = [("XRMS", "mrad"), ("XMEAN", "mrad"), ("ORBIT-RMS", "mm"),
                 ("ITER", "")]
        if self.has_freq:
            tails.insert(2, ("DF", "Hz"))
        for tail, units in tails:
            client.new_channel(p(tail, sep="-"), ChannelMeta(units=units, writable=False))
        self._push_config()
        # adopt whatever frequency offset is already applied, snapped to grid
        if self.has_freq:
            self.df_applied = quantize_frequency(
                client.get_float(RF_CHANNEL), 0.0, self.f_step)
        self._publish_telemetry(None, status=INVALID)
        return client

    def _push_config(self):
        if self._client is None:
            return
        c, p = self._client, self._ch
        c.put(p("MODE"), self.mode)
        c.put(p("PERIOD"), self.period)
        c.put(p("SV-MASK"), self.corrector.mask)
        c.put(p("F-STEP"), self.f_step)
        c.put(p("GAIN"), self.gain)
        c.put(p("F-WEIGHT"), self.f_weight)

    def _pull_config(self):
        """Absorb control-channel puts at the iteration boundary."""
        c, p = self._client, self._ch
        mode = c.get_text(p("MODE"))
        if mode in MODES:
            self.mode = mode
        else:
            c.put(p("MODE"), self.mode)  # reject unknown text, show state
        self.period = c.get_float(p("PERIOD"))
        f_step = c.get_float(p("F-STEP"))
        if f_step > 0:
            self._set_f_step(f_step)
        else:
            c.put(p("F-STEP"), self.f_step)
        self.gain = c.get_float(p("GAIN"))
        if self.mode == STOPPED:
            self.corrector.set_mask(c.get_vector(p("SV-MASK")))
            weight = c.get_float(p("F-WEIGHT"))
            if self.has_freq and weight != self.f_weight and weight > 0:
                mask = self.corrector.mask
                self.f_weight = weight
                self.corrector = self._factor()
                self.corrector.mask = mask

    # -- the loop body --------------------------------------------------------

    def _publish_telemetry(self, ts, status=OK, orbit_rms=None):
        c, p = self._client, self._ch
        n_mag = self.response.r.shape[1]
        mag = self.kicks[:n_mag]
        tele = {
            "XRMS": float(np.sqrt(np.mean(mag**2))),
            "XMEAN": float(np.mean(mag)),
            "ORBIT-RMS": self._last_telemetry.get("ORBIT-RMS", 0.0)
            if orbit_rms is None else orbit_rms,
            "ITER": float(self.iteration),
        }
        if self.has_freq:
            tele["DF"] = self.df_applied
        self._last_telemetry = tele
        for tail, value in tele.items():
            if ts is None:
                c.put(p(tail, sep="-"), value, status=status)
            else:
                c.put(p(tail, sep="-"), value, timestamp=ts, status=status)

    def iterate_once(self) -> bool:
        """One loop turn; returns True when a correction pass ran."""
        self._pull_config()
        if self.mode == STOPPED:
            return False
        c = self._client
        bpm = c.get(self.bpm_channel)

        # stale data guard: the orbit timestamp must advance within 3 turns
        if self._last_bpm_ts is not None and bpm.timestamp <= self._last_bpm_ts:
            self._stale_count += 1
        else:
            self._stale_count = 0
        self._last_bpm_ts = max(bpm.timestamp, self._last_bpm_ts or bpm.timestamp)
        if self._stale_count >= 3 or bpm.status == INVALID:
            self._publish_telemetry(bpm.timestamp, status=INVALID)
            return False

        orbit = bpm.as_vector()
        try:
            kick = self.gain * compute_correction(self.corrector, orbit)
        except AllDisabled:
            self._publish_telemetry(bpm.timestamp, status=INVALID)
            return False
        orbit_rms = float(np.sqrt(np.mean((orbit - self.reference) ** 2)))

        if self.mode == ACTIVE:
            n_mag = self.response.r.shape[1]
            theta = c.get_vector(self.cor_channel) + kick[:n_mag]
            c.put(self.cor_channel, theta)
            self.kicks[:n_mag] += kick[:n_mag]
            if self.has_freq:
                self.kicks[-1] += kick[-1]
                target = self.df_applied + self.f_weight * kick[-1]
                new_df = quantize_frequency(target, self.df_applied, self.f_step)
                if new_df != self.df_applied:
                    self.df_applied = new_df
                    c.put(RF_CHANNEL, new_df)
        self.iteration += 1
        self._publish_telemetry(bpm.timestamp, orbit_rms=orbit_rms)
        return True

    # -- service entry ---------------------------------------------------------

    def shutdown(self):
        self._stop.set()

    def run(self):
        """Loop on a wall-clock period until shutdown(); reconnects on loss."""
        backoff = 0.5
        while not self._stop.is_set():
            try:
                with BusClient(self.addr) as client:
                    backoff = 0.5
                    self.connect(client)
                    while not self._stop.is_set():
                        t0 = time.monotonic()
                        self.iterate_once()
                        pause = self.period - (time.monotonic() - t0)
                        if pause > 0:
                            self._stop.wait(pause)
            except (BusConnectionError, OSError):
                if self._stop.wait(backoff):
                    return
                backoff = min(backoff * 2.0, 10.0)
            finally:
                self._client = None
