import os
import re
import signal
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from ringd.bus import SoftBus
from ringd.cli import main_arch, main_ctl, main_gen, main_optics
from ringd.client import BusClient
from ringd.ofb import load_response
from ringd.optics import load_optics
from ringd.ring import Ring, RingConfig
from ringd.server import WireServer
from ringd.snapshot import read_snapshot
from ringd.values import INVALID


@pytest.fixture
def rig():
    bus = SoftBus(clock=lambda: 0.0)
    bus.create_channel("T:S", initial=1.5)
    bus.create_channel("T:V", initial=[1.0, 2.0, 3.0], vector_length=3)
    bus.create_channel("T:RO", initial=9.0, writable=False)
    server = WireServer(bus, host="127.0.0.1", port=0)
    server.start()
    yield bus, server.addr
    server.stop()


def ctl(addr, *argv):
    return main_ctl(["--bus", addr, *argv])


# -- get / put -------------------------------------------------------------------


def test_get_prints_value_line(rig, capsys):
    bus, addr = rig
    assert ctl(addr, "get", "T:S") == 0
    assert capsys.readouterr().out == "T:S 0.0 1.5\n"


def test_get_vector_space_separated(rig, capsys):
    bus, addr = rig
    assert ctl(addr, "get", "T:V") == 0
    assert capsys.readouterr().out == "T:V 0.0 1.0 2.0 3.0\n"


def test_get_unknown_exits_2(rig, capsys):
    bus, addr = rig
    assert ctl(addr, "get", "T:NOPE") == 2


def test_put_then_get_round_trip(rig, capsys):
    bus, addr = rig
    assert ctl(addr, "put", "T:S", "0.1") == 0
    assert ctl(addr, "get", "T:S") == 0
    assert capsys.readouterr().out.split()[-1] == "0.1"


def test_get_output_feeds_put(rig, capsys):
    bus, addr = rig
    ctl(addr, "put", "T:V", "0.30000000000000004", "-1e-300", "2.5")
    line = capsys.readouterr()
    ctl(addr, "get", "T:V")
    name, ts, *values = capsys.readouterr().out.split()
    assert ctl(addr, "put", name, *values) == 0
    assert bus.get("T:V").value.tolist() == [0.30000000000000004, -1e-300, 2.5]


def test_put_wrong_arity_exits_3(rig):
    bus, addr = rig
    assert ctl(addr, "put", "T:V", "1.0", "2.0") == 3


def test_put_read_only_exits_4(rig):
    bus, addr = rig
    assert ctl(addr, "put", "T:RO", "1.0") == 4


def test_put_unknown_exits_2(rig):
    bus, addr = rig
    assert ctl(addr, "put", "T:NOPE", "1.0") == 2


# -- monitor ---------------------------------------------------------------------


def test_monitor_count_1_prints_initial(rig, capsys):
    bus, addr = rig
    assert ctl(addr, "monitor", "T:S", "--count", "1") == 0
    out = capsys.readouterr().out
    assert out == "EV T:S 0.0 1.5\n"


def test_monitor_streams_events_in_order(rig, capsys):
    bus, addr = rig

    def pump():
        time.sleep(0.2)
        for i in range(3):
            bus.put("T:S", float(i), timestamp=float(i + 1))

    thread = threading.Thread(target=pump)
    thread.start()
    assert ctl(addr, "monitor", "T:S", "--count", "4") == 0
    thread.join()
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4
    assert [line.split()[-1] for line in lines] == ["1.5", "0.0", "1.0", "2.0"]


def test_monitor_unknown_exits_2(rig):
    bus, addr = rig
    assert ctl(addr, "monitor", "T:NOPE", "--count", "1") == 2


def test_monitor_shows_invalid_marker(rig, capsys):
    bus, addr = rig
    bus.put("T:S", 2.0, timestamp=1.0, status=INVALID)
    assert ctl(addr, "monitor", "T:S", "--count", "1") == 0
    assert "!INVALID" in capsys.readouterr().out


# -- save / restore ----------------------------------------------------------------


def test_save_restore_cycle(rig, tmp_path, capsys):
    bus, addr = rig
    path = str(tmp_path / "state.snap")
    assert ctl(addr, "save", "--glob", "T:*", "--out", path) == 0
    snap = read_snapshot(path)  # file parses
    assert set(snap.names()) == {"T:S", "T:V", "T:RO"}
    bus.put("T:S", -4.0)
    bus.put("T:V", [9.0, 9.0, 9.0])
    # RO channel cannot be restored over the wire: reported, exit 1
    assert ctl(addr, "restore", path) == 1
    assert bus.get("T:S").value == 1.5
    assert bus.get("T:V").value.tolist() == [1.0, 2.0, 3.0]


def test_restore_bad_file_exits_5_with_line(rig, tmp_path, capsys):
    bus, addr = rig
    path = tmp_path / "broken.snap"
    path.write_text("--- RINGD SNAPSHOT v1 ---\nT:S 1.0\nbad!name 2.0\n<END>\n")
    assert ctl(addr, "restore", str(path)) == 5
    assert "line 3" in capsys.readouterr().err


# -- archiver CLI ---------------------------------------------------------------------


def test_arch_query_and_csv(tmp_path, capsys):
    store = tmp_path / "s"
    store.write_text("A 1.0 X 10.0\nA 2.0 X 20.0\nA 3.0 Y 1.0\n")
    assert main_arch(["query", "--store", str(store), "--name", "X",
                      "--from", "0", "--to", "9"]) == 0
    assert capsys.readouterr().out == "1.0 10.0\n2.0 20.0\n"
    csv = tmp_path / "x.csv"
    assert main_arch(["query", "--store", str(store), "--name", "X",
                      "--from", "0", "--to", "9", "--csv", str(csv)]) == 0
    assert csv.read_text().splitlines()[0] == "t,X"
    assert main_arch(["query", "--store", str(store), "--name", "Z",
                      "--from", "0", "--to", "9"]) == 2


# -- file generation -------------------------------------------------------------------


def test_gen_writes_consistent_files(tmp_path, capsys):
    optics = str(tmp_path / "nominal.optics")
    resp_x = str(tmp_path / "x.resp")
    resp_y = str(tmp_path / "y.resp")
    assert main_gen(["--optics", optics, "--response-x", resp_x,
                     "--response-y", resp_y]) == 0
    setup = load_optics(optics)
    assert setup.i_quad_nom.shape == (174,)
    rx = load_response(resp_x)
    assert rx.r.shape == (72, 72) and rx.freq_col is not None
    assert load_response(resp_y).freq_col is None


def test_gen_with_config_file(tmp_path):
    cfg = tmp_path / "ring.cfg"
    cfg.write_text("n_bpm = 24\nn_corr = 24\nnu_x = 5.19\nnu_y = 3.27\n")
    resp = str(tmp_path / "x.resp")
    assert main_gen(["--config", str(cfg), "--response-x", resp]) == 0
    assert load_response(resp).r.shape == (24, 24)


# -- optics CLI against the live ring ---------------------------------------------------


@pytest.fixture
def ring_rig(tmp_path):
    config = RingConfig(bpm_noise_rms=0.0, drift_amplitude=0.0, walk_rms=0.0)
    ring = Ring(config)
    server = WireServer(ring.bus, host="127.0.0.1", port=0)
    server.start()
    optics = str(tmp_path / "nominal.optics")
    main_gen(["--optics", optics])
    yield ring, server.addr, optics
    server.stop()


def test_optics_apply_and_infer(ring_rig, capsys):
    ring, addr, optics = ring_rig
    rc = main_optics(["apply", "--bus", addr, "--optics", optics,
                      "--param", "d_nu_x=0.02", "--param", "s_energy=1.01"])
    assert rc == 0
    ring.step()
    nu_x = ring.bus.get("RING:TUNE-X").value
    assert abs(nu_x - (ring.config.nu_x + 0.02)) < 1e-9
    capsys.readouterr()
    assert main_optics(["infer", "--bus", addr, "--optics", optics]) == 0
    out = dict(line.split() for line in capsys.readouterr().out.splitlines())
    assert abs(float(out["d_nu_x"]) - 0.02) < 1e-9
    assert abs(float(out["s_energy"]) - 1.01) < 1e-12
    assert float(out["quad_residual"]) < 1e-9


def test_optics_bad_param_exits_5(ring_rig):
    ring, addr, optics = ring_rig
    assert main_optics(["apply", "--bus", addr, "--optics", optics,
                        "--param", "bogus=1"]) == 5


# -- entry points as real processes ------------------------------------------------------


def spawn(*argv):
    return subprocess.Popen(
        [*argv], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        cwd=os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def wait_addr(proc, pattern):
    line = proc.stderr.readline()
    m = re.search(pattern, line)
    assert m, f"unexpected banner: {line!r}"
    return m.group(1)


def interrupt(proc):
    proc.send_signal(signal.SIGINT)
    out, err = proc.communicate(timeout=10)
    assert proc.returncode == 0, err


def test_bus_process_serves_channels():
    proc = spawn("ringd-bus", "--bus", "127.0.0.1:0")
    try:
        addr = wait_addr(proc, r"listening on (\S+)")
        with BusClient(addr) as client:
            client.new_channel("SCRATCH:A")
            client.put("SCRATCH:A", 4.25)
            assert client.get_float("SCRATCH:A") == 4.25
    finally:
        interrupt(proc)


def test_sim_process_steps_and_serves():
    proc = spawn("ringd-sim", "--bus", "127.0.0.1:0", "--speedup", "50")
    try:
        addr = wait_addr(proc, r"serving on (\S+)")
        with BusClient(addr) as client:
            t0 = client.get("ARIDI-BEAM:CURRENT").timestamp
            deadline = time.monotonic() + 10.0
            while time.monotonic() < deadline:
                if client.get("ARIDI-BEAM:CURRENT").timestamp > t0:
                    break
                time.sleep(0.05)
            assert client.get("ARIDI-BEAM:CURRENT").timestamp > t0
    finally:
        interrupt(proc)


def test_lifetime_process_publishes_results():
    sim = spawn("ringd-sim", "--bus", "127.0.0.1:0", "--speedup", "200")
    try:
        addr = wait_addr(sim, r"serving on (\S+)")
        engine = spawn("ringd-lifetime", "--bus", addr, "--window", "10")
        try:
            with BusClient(addr) as client:
                deadline = time.monotonic() + 15.0
                tau = 0.0
                while time.monotonic() < deadline:
                    if "LIFETIME:EXPFIT" in client.list("LIFETIME:*"):
                        v = client.get("LIFETIME:EXPFIT")
                        if v.status == "OK" and v.payload:
                            tau = float(v.payload)
                            break
                    time.sleep(0.1)
                assert tau > 0.0  # [h]
        finally:
            interrupt(engine)
    finally:
        interrupt(sim)
