"""Optics control: few physical parameters in, magnet currents out.

An optics setup carries nominal current vectors plus adjustment matrices;
six scalars (tune shifts, chromaticity shifts, sextupole scale, energy
scale) then determine every quadrupole, sextupole and bend current. The
inverse direction recovers the parameters from measured currents with
residuals, so the actual machine state is always deducible. Setups travel
as snapshot files with pseudo-channel names, and a serve mode re-applies
the optics whenever a parameter channel is written.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, replace

import numpy as np

from .client import BusClient
from .errors import (
    BusConnectionError,
    ParseError,
    RankDeficient,
    ShapeMismatch,
    SingularFit,
)
from .ring import RingConfig, chrom_gradients, nominal_currents, tune_gradients
from .snapshot import Snapshot, read_snapshot, write_snapshot
from .values import ChannelMeta, parse_float, values_equal

PARAM_CHANNELS = {
    "d_nu_x": "OPTICS:D-NU-X",
    "d_nu_y": "OPTICS:D-NU-Y",
    "d_xi_x": "OPTICS:D-XI-X",
    "d_xi_y": "OPTICS:D-XI-Y",
    "s_sext": "OPTICS:S-SEXT",
    "s_energy": "OPTICS:S-ENERGY",
}
NAME_CHANNEL = "OPTICS:NAME"
QUAD_SET = "ARIDI-QUAD:SET"
SEXT_SET = "ARIDI-SEXT:SET"
BEND_SET = "ARIDI-BEND:SET"


@dataclass
class AdjustmentParams:
    d_nu_x: float = 0.0
    d_nu_y: float = 0.0
    d_xi_x: float = 0.0
    d_xi_y: float = 0.0
    s_sext: float = 1.0
    s_energy: float = 1.0

    def __post_init__(self):
        if self.s_energy <= 0:
            raise ValueError("s_energy must be > 0")
        if self.s_sext < 0:
            raise ValueError("s_sext must be >= 0")

    def as_tuple(self):
        return (self.d_nu_x, self.d_nu_y, self.d_xi_x, self.d_xi_y,
                self.s_sext, self.s_energy)


@dataclass
class OpticsSetup:
    name: str
    i_quad_nom: np.ndarray   # [A]
    i_sext_nom: np.ndarray   # [A]
    i_bend_nom: np.ndarray   # [A]
    m_tune: np.ndarray       # [A] per unit tune shift, n_quad x 2
    m_chrom: np.ndarray      # [A] per unit chromaticity shift, n_sext x 2

    def validate(self, g_tune=None, g_chrom=None, tol=1e-9):
        if self.m_tune.shape != (len(self.i_quad_nom), 2):
            raise ShapeMismatch(f"m_tune shape {self.m_tune.shape}")
        if self.m_chrom.shape != (len(self.i_sext_nom), 2):
            raise ShapeMismatch(f"m_chrom shape {self.m_chrom.shape}")
        for label, m in (("tune", self.m_tune), ("chrom", self.m_chrom)):
            if np.linalg.matrix_rank(m) < 2:
                raise RankDeficient(f"{label} matrix has rank < 2")
        for label, g, m in (("tune", g_tune, self.m_tune),
                            ("chrom", g_chrom, self.m_chrom)):
            if g is not None:
                err = np.max(np.abs(g @ m - np.eye(2)))
                if err > tol:
                    raise RankDeficient(
                        f"{label} matrix inconsistent with ring gradients (err={err:.2e})")
        return self


def derive_setup(config: RingConfig | None = None, name: str = "nominal") -> OpticsSetup:
    """Optics consistent with the ring model: M = pinv(G), so G M = identity."""
    cfg = config or RingConfig()
    i_quad, i_sext, i_bend = nominal_currents(cfg)
    m_tune = np.linalg.pinv(tune_gradients(cfg))
    m_chrom = np.linalg.pinv(chrom_gradients(cfg))
    return OpticsSetup(name, i_quad, i_sext, i_bend, m_tune, m_chrom)


def compute_currents(setup: OpticsSetup, p: AdjustmentParams):
    """(I_quad, I_sext, I_bend) [A] for the given adjustment parameters."""
    d_nu = np.array([p.d_nu_x, p.d_nu_y])
    d_xi = np.array([p.d_xi_x, p.d_xi_y])
    i_quad = p.s_energy * (setup.i_quad_nom + setup.m_tune @ d_nu)
    i_sext = p.s_energy * p.s_sext * (setup.i_sext_nom + setup.m_chrom @ d_xi)
    i_bend = p.s_energy * setup.i_bend_nom
    return i_quad, i_sext, i_bend


@dataclass
class InferenceResult:
    params: AdjustmentParams
    quad_residual: float  # [A] rms of the unexplained quad currents
    sext_residual: float  # [A]


def infer_params(setup: OpticsSetup, i_quad, i_sext, i_bend) -> InferenceResult:
    """Recover the six parameters from magnet currents.

    Energy scale from the bend-current mean; tune shifts by least squares
    on the scaled quads; the sextupole relation is linear in
    (s_sext, s_sext*d_xi), so one joint solve recovers scale and shifts.
    """
    i_quad = np.asarray(i_quad, dtype=float)
    i_sext = np.asarray(i_sext, dtype=float)
    i_bend = np.asarray(i_bend, dtype=float)
    nom_bend = float(np.mean(setup.i_bend_nom))
    if nom_bend == 0.0:
        raise SingularFit("nominal bend current is zero")
    s_energy = float(np.mean(i_bend)) / nom_bend
    if s_energy <= 0:
        raise SingularFit(f"non-physical energy scale {s_energy}")

    dq = i_quad / s_energy - setup.i_quad_nom
    d_nu, _, rank, _ = np.linalg.lstsq(setup.m_tune, dq, rcond=None)
    if rank < 2:
        raise SingularFit("tune matrix is rank deficient")
    quad_res = float(np.sqrt(np.mean((setup.m_tune @ d_nu - dq) ** 2)))

    # i_sext/s_energy = s_sext*i_sext_nom + m_chrom @ (s_sext*d_xi)
    a = np.column_stack([setup.i_sext_nom, setup.m_chrom])
    coef, _, rank, _ = np.linalg.lstsq(a, i_sext / s_energy, rcond=None)
    if rank < 3:
        raise SingularFit("sextupole system is rank deficient")
    s_sext = float(coef[0])
    if abs(s_sext) < 1e-12:
        d_xi = np.zeros(2)
    else:
        d_xi = coef[1:] / s_sext
    sext_res = float(np.sqrt(np.mean((a @ coef - i_sext / s_energy) ** 2)))

    params = AdjustmentParams(float(d_nu[0]), float(d_nu[1]),
                              float(d_xi[0]), float(d_xi[1]),
                              max(s_sext, 0.0), s_energy)
    return InferenceResult(params, quad_res, sext_res)


# -- optics files ------------------------------------------------------------

_FILE_KEYS = ("I-QUAD-NOM", "I-SEXT-NOM", "I-BEND-NOM",
              "M-TUNE-COL0", "M-TUNE-COL1", "M-CHROM-COL0", "M-CHROM-COL1")


def write_optics(setup: OpticsSetup, path: str):
    snap = Snapshot(optics_name=setup.name)
    snap.add("OPTICSFILE:I-QUAD-NOM", setup.i_quad_nom)
    snap.add("OPTICSFILE:I-SEXT-NOM", setup.i_sext_nom)
    snap.add("OPTICSFILE:I-BEND-NOM", setup.i_bend_nom)
    snap.add("OPTICSFILE:M-TUNE-COL0", setup.m_tune[:, 0])
    snap.add("OPTICSFILE:M-TUNE-COL1", setup.m_tune[:, 1])
    snap.add("OPTICSFILE:M-CHROM-COL0", setup.m_chrom[:, 0])
    snap.add("OPTICSFILE:M-CHROM-COL1", setup.m_chrom[:, 1])
    write_snapshot(snap, path)


def load_optics(path: str, g_tune=None, g_chrom=None) -> OpticsSetup:
    snap = read_snapshot(path)
    vecs = {}
    for key in _FILE_KEYS:
        payload = snap.get(f"OPTICSFILE:{key}")
        if payload is None:
            raise ParseError(f"optics file lacks OPTICSFILE:{key}")
        vecs[key] = np.array([parse_float(tok) for tok in payload.split()])
    setup = OpticsSetup(
        snap.optics_name or "unnamed",
        vecs["I-QUAD-NOM"], vecs["I-SEXT-NOM"], vecs["I-BEND-NOM"],
        np.column_stack([vecs["M-TUNE-COL0"], vecs["M-TUNE-COL1"]]),
        np.column_stack([vecs["M-CHROM-COL0"], vecs["M-CHROM-COL1"]]))
    return setup.validate(g_tune, g_chrom)


# -- bus operations -----------------------------------------------------------


def ensure_param_channels(client, setup_name=None):
    for ch in PARAM_CHANNELS.values():
        client.new_channel(ch, ChannelMeta())
    client.new_channel(NAME_CHANNEL, ChannelMeta(text=True))
    if setup_name is not None:
        client.put(NAME_CHANNEL, setup_name)


def apply(setup: OpticsSetup, p: AdjustmentParams, client):
    """Write all magnet currents, then publish the parameters as channels."""
    i_quad, i_sext, i_bend = compute_currents(setup, p)
    client.put(QUAD_SET, i_quad)
    client.put(SEXT_SET, i_sext)
    client.put(BEND_SET, i_bend)
    ensure_param_channels(client, setup.name)
    for field, ch in PARAM_CHANNELS.items():
        client.put(ch, getattr(p, field))


def infer_from_bus(setup: OpticsSetup, client) -> InferenceResult:
    return infer_params(setup,
                        client.get_vector(QUAD_SET),
                        client.get_vector(SEXT_SET),
                        client.get_vector(BEND_SET))


class OpticsService:
    """Applies the optics and re-applies it on every parameter-channel put."""

    def __init__(self, setup: OpticsSetup, addr: str | None = None,
                 params: AdjustmentParams | None = None):
        self.setup = setup
        self.addr = addr
        self.params = params or AdjustmentParams()
        self._stop = threading.Event()

    def stop(self):
        self._stop.set()

    def _serve(self, client: BusClient):
        apply(self.setup, self.params, client)
        subs = {field: client.monitor(ch) for field, ch in PARAM_CHANNELS.items()}
        while not self._stop.is_set():
            changed = False
            for field, sub in subs.items():
                try:
                    ev = sub.get(timeout=0.05)
                except queue.Empty:
                    continue
                if not values_equal(ev.as_float(), getattr(self.params, field)):
                    try:
                        self.params = replace(self.params, **{field: ev.as_float()})
                    except ValueError:
                        continue  # out-of-range put; keep last good value
                    changed = True
            if changed:
                i_quad, i_sext, i_bend = compute_currents(self.setup, self.params)
                client.put(QUAD_SET, i_quad)
                client.put(SEXT_SET, i_sext)
                client.put(BEND_SET, i_bend)

    def run(self):
        backoff = 0.5
        while not self._stop.is_set():
            try:
                with BusClient(self.addr) as client:
                    backoff = 0.5
                    self._serve(client)
            except (BusConnectionError, OSError):
                if self._stop.wait(backoff):
                    return
                backoff = min(backoff * 2.0, 10.0)
