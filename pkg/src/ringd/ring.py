"""Storage ring simulator.

Publishes beam current, orbit, tunes and the true lifetime on the bus and
reacts to magnet/RF setpoint channels. The physics is the standard linear
machine model: closed-orbit response matrix from a synthetic lattice,
dispersion coupling RF frequency to the horizontal orbit, two-term current
decay (gas + Touschek), and linear tune/chromaticity maps in the magnet
currents. One stepper owns the state; everything else talks channels.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, fields

import numpy as np

from .bus import SoftBus
from .errors import (
    BadThreshold,
    DegenerateTune,
    NegativeInjection,
    ParseError,
)
from .values import INVALID, OK, ChannelMeta


@dataclass
class RingConfig:
    n_bpm: int = 72
    n_corr: int = 72        # per plane; RF frequency acts as corrector 73
    n_quad: int = 174
    n_sext: int = 120
    n_bend: int = 36
    f0: float = 499.654e6   # [Hz]
    alpha_c: float = 6.0e-4
    nu_x: float = 20.38
    nu_y: float = 8.16
    xi_x: float = 6.0       # nominal chromaticity at nominal sextupoles
    xi_y: float = 4.0
    tau_gas: float = 30.0       # [h]
    c_touschek: float = 1500.0  # [mA h]
    current0: float = 150.0     # [mA]
    dt: float = 2.0             # [s] publication period
    bpm_noise_rms: float = 1e-4    # [mm]
    drift_amplitude: float = 0.01  # [mm] slow sinusoid on the orbit
    drift_period: float = 300.0    # [s]
    walk_rms: float = 2e-4         # [mm] random-walk step per plane
    seed: int = 1

    def __post_init__(self):
        for f in ("n_bpm", "n_corr", "n_quad", "n_sext", "n_bend"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.f0 <= 0:
            raise ValueError("f0 must be > 0")
        if self.alpha_c == 0:
            raise ValueError("alpha_c must be nonzero")
        if self.tau_gas <= 0 or self.c_touschek <= 0:
            raise ValueError("lifetimes must be > 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")


_BOOL_FIELDS = ()


def load_config(path: str) -> RingConfig:
    """Flat key = value config text; # starts a comment; keys match RingConfig."""
    kinds = {f.name: f.type for f in fields(RingConfig)}
    kwargs = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected key = value, got {line!r}", line=lineno)
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in kinds:
                raise ParseError(f"unknown config key {key!r}", line=lineno)
            try:
                kwargs[key] = int(val) if kinds[key] == "int" else float(val)
            except ValueError:
                raise ParseError(f"bad value for {key}: {val!r}", line=lineno) from None
    try:
        return RingConfig(**kwargs)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


# ---------------------------------------------------------------------------
# lattice and response model


def closed_orbit_response(beta_obs, phi_obs, beta_src, phi_src, nu):
    """Closed-orbit response R_ij = sqrt(b_i b_j) cos(pi nu - |phi_i - phi_j|) / (2 sin pi nu)."""
    frac = nu % 1.0
    if min(frac, abs(frac - 0.5), 1.0 - frac) < 1e-6:
        # integer tune: 1/sin(pi nu) blows up; half integer: kick pattern
        # aliases the cell sampling and the sampled response loses rank
        raise DegenerateTune(f"fractional tune too close to 0 or 0.5: nu={nu}")
    s = math.sin(math.pi * nu)
    dphi = np.abs(phi_obs[:, None] - phi_src[None, :])
    amp = np.sqrt(np.outer(beta_obs, beta_src))
    return amp * np.cos(math.pi * nu - dphi) / (2.0 * s)


def _beta(frac, offset):
    # smooth periodic beta function, range [1.5, 19.5] m
    return 10.5 + 9.0 * np.cos(2 * np.pi * 3 * frac + offset)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _lattice_fracs(n, half_offset):
    """Ring positions as fractions of the circumference.

    Cells are equally spaced with a fixed quasi-periodic jitter of 0.2 cells;
    exactly uniform spacing aliases the Nyquist kick pattern and makes the
    response matrix singular (one zero singular value).
    """
    i = np.arange(n)
    if half_offset:
        jit = 0.2 * np.cos(2 * np.pi * ((i * _GOLDEN * _GOLDEN) % 1.0))
        return (i + 0.5 + jit) / n
    jit = 0.2 * np.sin(2 * np.pi * ((i * _GOLDEN) % 1.0))
    return (i + jit) / n


@dataclass
class ResponseModel:
    """Self-consistent orbit response used by both simulator and feedback."""

    nu_x: float
    nu_y: float
    f0: float        # [Hz]
    alpha_c: float
    R_x: np.ndarray  # [mm/mrad] n_bpm x n_corr
    R_y: np.ndarray  # [mm/mrad]
    eta_mm: np.ndarray  # [mm] horizontal dispersion at the BPMs

    @property
    def freq_col(self) -> np.ndarray:
        """Orbit shift per Hz of RF detuning [mm/Hz]: the 73rd corrector."""
        return -self.eta_mm / (self.alpha_c * self.f0)

    @property
    def R_ext_x(self) -> np.ndarray:
        return np.hstack([self.R_x, self.freq_col[:, None]])


def derive_response(config: RingConfig) -> ResponseModel:
    nb, nc = config.n_bpm, config.n_corr
    frac_bpm = _lattice_fracs(nb, half_offset=False)
    frac_corr = _lattice_fracs(nc, half_offset=True)
    out = {}
    for plane, nu, off in (("x", config.nu_x, 0.0), ("y", config.nu_y, 2.1)):
        phi_b = 2 * np.pi * nu * frac_bpm
        phi_c = 2 * np.pi * nu * frac_corr
        out[plane] = closed_orbit_response(
            _beta(frac_bpm, off), phi_b, _beta(frac_corr, off), phi_c, nu)
    eta_mm = 1000.0 * (0.25 + 0.15 * np.cos(2 * np.pi * 2 * frac_bpm + 0.9))
    return ResponseModel(config.nu_x, config.nu_y, config.f0, config.alpha_c,
                         out["x"], out["y"], eta_mm)


def tune_gradients(config: RingConfig) -> np.ndarray:
    """G_tune (2 x n_quad): tune shift per ampere on each quadrupole."""
    u = np.arange(config.n_quad) / config.n_quad
    alt = np.arange(config.n_quad) % 2 == 0
    gx = 0.004 * (1.0 + 0.5 * np.cos(2 * np.pi * u)) * np.where(alt, 1.0, -0.35)
    gy = 0.004 * (1.0 + 0.5 * np.sin(2 * np.pi * u)) * np.where(alt, -0.35, 1.0)
    return np.vstack([gx, gy])


def chrom_gradients(config: RingConfig) -> np.ndarray:
    """G_chrom (2 x n_sext): chromaticity shift per ampere on each sextupole."""
    u = np.arange(config.n_sext) / config.n_sext
    alt = np.arange(config.n_sext) % 2 == 0
    gx = 0.05 * (1.0 + 0.4 * np.cos(4 * np.pi * u)) * np.where(alt, 1.0, -0.3)
    gy = 0.05 * (1.0 + 0.4 * np.sin(4 * np.pi * u)) * np.where(alt, -0.3, 1.0)
    return np.vstack([gx, gy])


def nominal_currents(config: RingConfig):
    """(I_quad_nom, I_sext_nom, I_bend_nom) [A]."""
    uq = np.arange(config.n_quad) / config.n_quad
    us = np.arange(config.n_sext) / config.n_sext
    i_quad = 120.0 + 40.0 * np.sin(2 * np.pi * 3 * uq) + 5.0 * np.cos(2 * np.pi * 7 * uq)
    i_sext = 90.0 + 30.0 * np.sin(2 * np.pi * 2 * us + 0.5)
    i_bend = np.full(config.n_bend, 600.0)
    return i_quad, i_sext, i_bend


# ---------------------------------------------------------------------------
# beam current decay: dI/dt = -I (1/tau_gas + I/c_touschek)


def decay_current(i0: float, dt_s: float, a: float, b: float) -> float:
    """Exact solution from anchor i0 over dt_s; a = 1/tau_gas, b = 1/c_touschek [1/s, 1/(mA s)]."""
    if i0 <= 0.0:
        return 0.0
    if a == 0.0:
        return i0 / (1.0 + b * i0 * dt_s)
    e = math.exp(-a * dt_s)
    return a * i0 * e / (a + b * i0 * (1.0 - e))


def true_lifetime_h(i: float, a: float, b: float) -> float:
    """Instantaneous 1/(1/tau_gas + I/c_touschek) in hours; 0 when undefined."""
    denom = a + b * i
    return 1.0 / denom / 3600.0 if denom > 0 else 0.0


# ---------------------------------------------------------------------------


class Ring:
    """The machine. Owns a SoftBus whose clock is simulated time."""

    def __init__(self, config: RingConfig | None = None, bus: SoftBus | None = None):
        self.config = config or RingConfig()
        cfg = self.config
        self.t_sim = 0.0  # [s]
        self.bus = bus if bus is not None else SoftBus(clock=lambda: self.t_sim)
        self.model = derive_response(cfg)
        self.g_tune = tune_gradients(cfg)      # [1/A]
        self.g_chrom = chrom_gradients(cfg)    # [1/A]
        self.i_quad_nom, self.i_sext_nom, self.i_bend_nom = nominal_currents(cfg)

        # decay constants in seconds
        self._a = 0.0 if math.isinf(cfg.tau_gas) else 1.0 / (cfg.tau_gas * 3600.0)
        self._b = 0.0 if math.isinf(cfg.c_touschek) else 1.0 / (cfg.c_touschek * 3600.0)
        self._anchor_t = 0.0
        self._anchor_i = cfg.current0  # [mA]
        self.current = cfg.current0    # [mA]

        self._rng = np.random.default_rng(cfg.seed)
        self._walk = {"x": np.zeros(cfg.n_bpm), "y": np.zeros(cfg.n_bpm)}
        self._drift_delta = 0.0  # accumulated momentum offset from RING:MOMENTUM-DRIFT
        self._top_up = None      # (threshold, refill_to) [mA]
        self._lock = threading.Lock()
        self._stop = threading.Event()

        self._make_channels()
        self._publish_readbacks()

    # -- channels ---------------------------------------------------------

    def _make_channels(self):
        bus, cfg = self.bus, self.config
        self.ch = {}

        def out(name, initial=0.0, units="", n=0):
            self.ch[name] = bus.create_channel(
                name, ChannelMeta(units=units, writable=False, vector_length=n),
                initial=initial)

        out("ARIDI-BEAM:CURRENT", cfg.current0, "mA")
        out("ARIDI-BPM:X", np.zeros(cfg.n_bpm), "mm", cfg.n_bpm)
        out("ARIDI-BPM:Y", np.zeros(cfg.n_bpm), "mm", cfg.n_bpm)
        out("RING:TUNE-X", cfg.nu_x)
        out("RING:TUNE-Y", cfg.nu_y)
        out("RING:CHROM-X", cfg.xi_x)
        out("RING:CHROM-Y", cfg.xi_y)
        out("RING:TRUE-LIFETIME", true_lifetime_h(cfg.current0, self._a, self._b), "h")

        setp = [
            ("ARIDI-COR-X:SET", np.zeros(cfg.n_corr), "mrad", cfg.n_corr),
            ("ARIDI-COR-Y:SET", np.zeros(cfg.n_corr), "mrad", cfg.n_corr),
            ("ARIDI-QUAD:SET", self.i_quad_nom, "A", cfg.n_quad),
            ("ARIDI-SEXT:SET", self.i_sext_nom, "A", cfg.n_sext),
            ("ARIDI-BEND:SET", self.i_bend_nom, "A", cfg.n_bend),
            ("ARIDI-RF:DELTA-F", 0.0, "Hz", 0),
            ("RING:MOMENTUM-DRIFT", 0.0, "1/s", 0),
        ]
        for name, init, units, n in setp:
            self.ch[name] = bus.create_channel(
                name, ChannelMeta(units=units, vector_length=n), initial=init)

    def _get(self, name):
        return self.ch[name].get().value

    # -- physics ----------------------------------------------------------

    def _orbit(self, noise=True):
        """Closed orbit per plane [mm] from current setpoints, drift and noise."""
        cfg, m = self.config, self.model
        theta_x = np.asarray(self._get("ARIDI-COR-X:SET"))  # [mrad]
        theta_y = np.asarray(self._get("ARIDI-COR-Y:SET"))
        delta_rf = -(self._get("ARIDI-RF:DELTA-F") / cfg.f0) / cfg.alpha_c
        delta = delta_rf + self._drift_delta
        phase = 2 * np.pi * self.t_sim / cfg.drift_period
        x = m.R_x @ theta_x + m.eta_mm * delta
        y = m.R_y @ theta_y
        if noise:
            x = x + cfg.drift_amplitude * math.sin(phase) + self._walk["x"]
            y = y + cfg.drift_amplitude * math.sin(phase + 1.0) + self._walk["y"]
            x = x + self._rng.normal(0.0, cfg.bpm_noise_rms, cfg.n_bpm)
            y = y + self._rng.normal(0.0, cfg.bpm_noise_rms, cfg.n_bpm)
        return x, y

    def _tunes(self):
        cfg = self.config
        i_bend = np.asarray(self._get("ARIDI-BEND:SET"))
        e_rel = float(np.mean(i_bend)) / float(np.mean(self.i_bend_nom))
        i_quad = np.asarray(self._get("ARIDI-QUAD:SET")) / e_rel
        i_sext = np.asarray(self._get("ARIDI-SEXT:SET")) / e_rel
        d_nu = self.g_tune @ (i_quad - self.i_quad_nom)
        d_xi = self.g_chrom @ (i_sext - self.i_sext_nom)
        return (cfg.nu_x + d_nu[0], cfg.nu_y + d_nu[1],
                cfg.xi_x + d_xi[0], cfg.xi_y + d_xi[1])

    def step(self, dt: float | None = None):
        """Advance simulated time, decay the current, publish all readbacks."""
        cfg = self.config
        dt = cfg.dt if dt is None else float(dt)
        if dt <= 0:
            raise ValueError("dt must be > 0")
        with self._lock:
            self.t_sim += dt
            self.current = decay_current(
                self._anchor_i, self.t_sim - self._anchor_t, self._a, self._b)
            if self._top_up is not None:
                threshold, refill_to = self._top_up
                if self.current < threshold:
                    self._anchor_t = self.t_sim
                    self._anchor_i = refill_to
                    self.current = refill_to
            rate = self._get("RING:MOMENTUM-DRIFT")  # d(delta)/dt [1/s]
            self._drift_delta += rate * dt
            if cfg.walk_rms > 0:
                self._walk["x"] += self._rng.normal(0.0, cfg.walk_rms, cfg.n_bpm)
                self._walk["y"] += self._rng.normal(0.0, cfg.walk_rms, cfg.n_bpm)
            self._publish_readbacks()

    def _publish_readbacks(self):
        ts = self.t_sim
        x, y = self._orbit()
        nu_x, nu_y, xi_x, xi_y = self._tunes()
        put = lambda name, v, **kw: self.ch[name].put(v, timestamp=ts, **kw)
        put("ARIDI-BEAM:CURRENT", self.current)
        put("ARIDI-BPM:X", x)
        put("ARIDI-BPM:Y", y)
        put("RING:TUNE-X", nu_x)
        put("RING:TUNE-Y", nu_y)
        put("RING:CHROM-X", xi_x)
        put("RING:CHROM-Y", xi_y)
        tau = true_lifetime_h(self.current, self._a, self._b)
        put("RING:TRUE-LIFETIME", tau, status=INVALID if tau == 0.0 else OK)

    def inject(self, delta_i: float):
        """Top-up style stepwise current increase [mA]."""
        if delta_i < 0:
            raise NegativeInjection(f"delta_i = {delta_i}")
        with self._lock:
            self._anchor_t = self.t_sim
            self._anchor_i = self.current + delta_i
            self.current = self._anchor_i
            self.ch["ARIDI-BEAM:CURRENT"].put(self.current, timestamp=self.t_sim)
        return self.current

    def set_top_up(self, enabled: bool, threshold: float = 149.9,
                   refill_to: float = 150.0):
        if enabled and threshold >= refill_to:
            raise BadThreshold(f"threshold {threshold} >= refill_to {refill_to}")
        self._top_up = (threshold, refill_to) if enabled else None

    # -- service loop -----------------------------------------------------

    def run(self, speedup: float = 1.0):
        """Step on a wall-clock ticker (dt/speedup between steps) until stop()."""
        interval = self.config.dt / speedup
        nxt = time.monotonic()
        while not self._stop.is_set():
            nxt += interval
            self.step()
            pause = nxt - time.monotonic()
            if pause > 0:
                self._stop.wait(pause)

    def stop(self):
        self._stop.set()
