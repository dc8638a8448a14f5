import threading
import time

import numpy as np
import pytest

from ringd.archiver import (
    ArchivePolicy,
    PolicyRule,
    Recorder,
    export_csv,
    load_policy,
    parse_policy,
    parse_record,
    query,
)
from ringd.bus import SoftBus
from ringd.errors import ParseError, UnknownChannel
from ringd.server import WireServer
from ringd.values import INVALID, ChannelMeta, format_float


# -- policy --------------------------------------------------------------------


def test_policy_parsing():
    pol = parse_policy("""
    # channels worth keeping
    OFB-* on-change
    ARIDI-BEAM:CURRENT periodic 2.0
    """)
    assert pol.match("OFB-DF").mode == "on-change"
    assert pol.match("ARIDI-BEAM:CURRENT").dt == 2.0
    assert pol.match("RING:TUNE-X") is None


def test_policy_first_rule_wins():
    pol = parse_policy("LIFETIME:EXPFIT periodic 5\nLIFETIME:* on-change\n")
    assert pol.match("LIFETIME:EXPFIT").mode == "periodic"
    assert pol.match("LIFETIME:MEDFILT").mode == "on-change"


def test_policy_errors_carry_line_numbers():
    with pytest.raises(ParseError) as err:
        parse_policy("OFB-* on-change\nX periodic 0\n")
    assert err.value.line == 2
    with pytest.raises(ParseError) as err:
        parse_policy("X sometimes\n")
    assert err.value.line == 1


def test_policy_file_round_trip(tmp_path):
    p = tmp_path / "arch.policy"
    p.write_text("A-* on-change\nB periodic 0.5\n")
    pol = load_policy(str(p))
    assert len(pol.rules) == 2


# -- record / query round trips -----------------------------------------------


@pytest.fixture
def rig(tmp_path):
    bus = SoftBus(clock=lambda: 0.0)
    server = WireServer(bus, host="127.0.0.1", port=0)
    server.start()
    store = str(tmp_path / "run.store")
    yield bus, server.addr, store
    server.stop()


def test_on_change_records_initial_plus_puts(rig):
    bus, addr, store = rig
    bus.create_channel("T:VAL", initial=1.0)
    rec = Recorder(addr, ArchivePolicy([PolicyRule("T:*", "on-change")]), store)
    for i, v in enumerate([2.0, 3.0, 4.0]):
        bus.put("T:VAL", v, timestamp=float(i + 1))
    deadline = time.monotonic() + 5.0
    while rec.written < 4 and time.monotonic() < deadline:
        rec.poll()
    rec.close()
    series = query(store, "T:VAL", -1e9, 1e9)
    assert [r.values()[0] for r in series] == [1.0, 2.0, 3.0, 4.0]


def test_periodic_sampling_rate(rig):
    bus, addr, store = rig
    bus.create_channel("T:CONST", initial=7.0)
    pol = ArchivePolicy([PolicyRule("T:CONST", "periodic", 0.05)])
    rec = Recorder(addr, pol, store)
    stop = threading.Event()
    thread = threading.Thread(target=rec.run, args=(stop,), kwargs={"tick": 0.01})
    thread.start()
    time.sleep(0.52)
    stop.set()
    thread.join()
    series = query(store, "T:CONST", -1e9, 1e9)
    assert 8 <= len(series) <= 13  # ~10 samples in 0.5 s
    assert all(r.values() == [7.0] for r in series)


def test_empty_glob_gives_valid_empty_store(rig):
    bus, addr, store = rig
    rec = Recorder(addr, ArchivePolicy([PolicyRule("NOPE-*", "on-change")]), store)
    rec.poll()
    rec.close()
    with pytest.raises(UnknownChannel):
        query(store, "NOPE-1", 0.0, 1.0)


def test_round_trip_bit_exact_scalars_and_vectors(rig):
    bus, addr, store = rig
    rng = np.random.default_rng(7)
    bus.create_channel("T:S", initial=0.0)
    bus.create_channel("T:V", initial=np.zeros(4), vector_length=4)
    rec = Recorder(addr, ArchivePolicy([PolicyRule("T:*", "on-change")]), store)
    scalars = [float(x) for x in rng.normal(size=50) * 10.0**rng.integers(-40, 40, 50)]
    vectors = rng.normal(size=(50, 4))
    for i in range(50):
        bus.put("T:S", scalars[i], timestamp=float(i + 1))
        bus.put("T:V", vectors[i], timestamp=float(i + 1))
    deadline = time.monotonic() + 5.0
    while rec.written < 102 and time.monotonic() < deadline:
        rec.poll()
    rec.close()
    s = query(store, "T:S", 1.0, 50.0)
    v = query(store, "T:V", 1.0, 50.0)
    assert [r.values()[0] for r in s] == scalars  # bit-exact via repr
    assert np.array_equal(np.array([r.values() for r in v]), vectors)


def test_query_window_inclusive_and_sorted(rig):
    bus, addr, store = rig
    bus.create_channel("T:X", initial=0.0)
    rec = Recorder(addr, ArchivePolicy([PolicyRule("T:X", "on-change")]), store)
    for i in range(10):
        bus.put("T:X", float(i), timestamp=float(i))
    deadline = time.monotonic() + 5.0
    while rec.written < 11 and time.monotonic() < deadline:
        rec.poll()
    rec.close()
    series = query(store, "T:X", 3.0, 6.0)
    assert [r.t for r in series] == [3.0, 4.0, 5.0, 6.0]  # both ends inclusive
    assert query(store, "T:X", 4.5, 4.6) == []
    with pytest.raises(ValueError):
        query(store, "T:X", 6.0, 3.0)


def test_invalid_status_preserved(rig):
    bus, addr, store = rig
    bus.create_channel("T:X", initial=1.5)
    rec = Recorder(addr, ArchivePolicy([PolicyRule("T:X", "on-change")]), store)
    bus.put("T:X", 2.5, timestamp=1.0, status=INVALID)
    deadline = time.monotonic() + 5.0
    while rec.written < 2 and time.monotonic() < deadline:
        rec.poll()
    rec.close()
    series = query(store, "T:X", -1.0, 2.0)
    assert series[-1].status == INVALID
    assert series[-1].values() == [2.5]


# -- store robustness -----------------------------------------------------------


def write_store(path, lines):
    with open(path, "w", encoding="utf-8") as f:
        f.write("".join(lines))


def test_torn_last_line_skipped(tmp_path):
    store = str(tmp_path / "s")
    write_store(store, ["A 1.0 X 10.0\n", "A 2.0 X 20.0\n", "A 3.0 X 3"])
    series = query(store, "X", 0.0, 9.0)
    assert [r.values()[0] for r in series] == [10.0, 20.0]


def test_corrupt_line_reported_with_offset_scan_continues(tmp_path):
    store = str(tmp_path / "s")
    good1 = "A 1.0 X 10.0\n"
    bad = "A not-a-time X 5.0\n"
    write_store(store, [good1, bad, "A 3.0 X 30.0\n"])
    corrupt = []
    series = query(store, "X", 0.0, 9.0, corrupt=corrupt)
    assert [r.values()[0] for r in series] == [10.0, 30.0]
    assert corrupt == [(len(good1), bad.rstrip("\n"))]


def test_unknown_channel_raises(tmp_path):
    store = str(tmp_path / "s")
    write_store(store, ["A 1.0 X 10.0\n"])
    with pytest.raises(UnknownChannel):
        query(store, "Y", 0.0, 9.0)


def test_record_line_shape():
    rec = parse_record("A 2.5 ARIDI-BPM:X 0.1 -0.2 0.3")
    assert rec.t == 2.5 and rec.name == "ARIDI-BPM:X"
    assert rec.values() == [0.1, -0.2, 0.3]
    for bad in ("B 1.0 X 1.0", "A x X 1.0", "A 1.0 bad!name 1.0", "A 1.0 X"):
        with pytest.raises((ParseError, ValueError)):
            parse_record(bad)


# -- CSV export ------------------------------------------------------------------


def test_csv_scalar_round_trip(tmp_path):
    store = str(tmp_path / "s")
    ts = [0.1, 0.2, 0.30000000000000004]
    vals = [1.5, -2.25, 3.3333333333333335]
    write_store(store, [f"A {format_float(t)} X {format_float(v)}\n"
                        for t, v in zip(ts, vals)])
    series = query(store, "X", 0.0, 1.0)
    path = str(tmp_path / "out.csv")
    export_csv(series, path)
    lines = open(path).read().splitlines()
    assert lines[0] == "t,X"
    back_t = [float(line.split(",")[0]) for line in lines[1:]]
    back_v = [float(line.split(",")[1]) for line in lines[1:]]
    assert back_t == ts and back_v == vals


def test_csv_vector_expansion(tmp_path):
    store = str(tmp_path / "s")
    write_store(store, ["A 1.0 V 1.0 2.0 3.0\n", "A 2.0 V 4.0 5.0 6.0\n"])
    path = str(tmp_path / "out.csv")
    export_csv(query(store, "V", 0.0, 9.0), path)
    lines = open(path).read().splitlines()
    assert lines[0] == "t,v0,v1,v2"
    assert lines[1] == "1.0,1.0,2.0,3.0"


def test_csv_empty_needs_flag(tmp_path):
    path = str(tmp_path / "out.csv")
    with pytest.raises(ValueError):
        export_csv([], path)
    export_csv([], path, name="X", empty_ok=True)
    assert open(path).read() == "t,X\n"
