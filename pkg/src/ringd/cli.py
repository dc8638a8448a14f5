"""Command line tools.

Every tool is a plain wire-protocol client (or server); none of them
import simulator state from a running process. That keeps them honest:
if the generic get/put/monitor/save/restore commands work, any other
protocol client will too.

Exit codes: 0 ok, 2 unknown channel, 3 shape mismatch, 4 read-only,
5 snapshot/policy parse error, 1 anything else.
"""

from __future__ import annotations

import argparse
import queue
import sys
import threading
import time

from .archiver import Recorder, export_csv, load_policy, query
from .bus import SoftBus
from .client import BusClient
from .errors import ParseError, ReadOnly, RingdError, ShapeMismatch, UnknownChannel
from .lifetime import LifetimeEngine
from .ofb import MODES, OfbServer, load_response, write_response
from .optics import (
    AdjustmentParams,
    OpticsService,
    apply,
    derive_setup,
    ensure_param_channels,
    infer_from_bus,
    load_optics,
    write_optics,
)
from .ring import Ring, RingConfig, derive_response, load_config
from .server import WireServer
from .snapshot import read_snapshot, restore_to_bus, snapshot_from_bus, write_snapshot
from .values import OK, STATUS_TOKEN, format_float
from .wire import resolve_addr

EXIT_UNKNOWN = 2
EXIT_SHAPE = 3
EXIT_READONLY = 4
EXIT_PARSE = 5


def _exit_code(exc) -> int:
    if isinstance(exc, UnknownChannel):
        return EXIT_UNKNOWN
    if isinstance(exc, ShapeMismatch):
        return EXIT_SHAPE
    if isinstance(exc, ReadOnly):
        return EXIT_READONLY
    if isinstance(exc, ParseError):
        return EXIT_PARSE
    return 1


def _fail(exc) -> int:
    msg = str(exc)
    if isinstance(exc, ParseError) and exc.line is not None:
        msg = f"line {exc.line}: {msg}"
    print(f"error: {msg}", file=sys.stderr)
    return _exit_code(exc)


def _bus_flag(parser):
    parser.add_argument("--bus", default=None, metavar="HOST:PORT",
                        help="bus address (default RINGD_BUS_ADDR or 127.0.0.1:5064)")


def _sample_line(prefix, value) -> str:
    payload = value.payload
    if value.status != OK:
        payload = f"{STATUS_TOKEN} {payload}".rstrip()
    return f"{prefix}{value.name} {format_float(value.timestamp)} {payload}".rstrip()


def _wait_interrupt(stop):
    try:
        while not stop.is_set():
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    stop.set()


# -- generic channel tools ------------------------------------------------------


def cmd_get(client, name, out=None) -> int:
    print(_sample_line("", client.get(name)), file=out or sys.stdout)
    return 0


def cmd_put(client, name, tokens) -> int:
    client.put_payload(name, " ".join(tokens))
    return 0


def cmd_monitor(client, name, count=None, out=None) -> int:
    sub = client.monitor(name)
    seen = 0
    try:
        while count is None or seen < count:
            try:
                value = sub.get(timeout=0.5)
            except queue.Empty:
                continue
            print(_sample_line("EV ", value), file=out or sys.stdout, flush=True)
            seen += 1
    except KeyboardInterrupt:
        pass
    finally:
        sub.cancel()
    return 0


def cmd_save(client, pattern, path, optics_name=None) -> int:
    snap, skipped = snapshot_from_bus(client, pattern, optics_name)
    write_snapshot(snap, path)
    print(f"saved {len(snap.entries)} channels to {path}", file=sys.stderr)
    if skipped:
        print(f"skipped {skipped} channels", file=sys.stderr)
    return 0


def cmd_restore(client, path) -> int:
    snap = read_snapshot(path)
    applied, failed = restore_to_bus(client, snap)
    print(f"restored {applied} channels from {path}", file=sys.stderr)
    if failed:
        print(f"{failed} channels failed to restore", file=sys.stderr)
    return 0 if not failed else 1


def main_ctl(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ringd-ctl", description="generic channel get/put/monitor/save/restore")
    _bus_flag(parser)
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("get");     p.add_argument("name")
    # REMAINDER so negative values like -1e-300 are not read as options
    p = sub.add_parser("put");     p.add_argument("name")
    p.add_argument("value", nargs=argparse.REMAINDER)
    p = sub.add_parser("monitor"); p.add_argument("name")
    p.add_argument("--count", type=int, default=None)
    p = sub.add_parser("save");    p.add_argument("--glob", default="*")
    p.add_argument("--out", required=True); p.add_argument("--optics-name", default=None)
    p = sub.add_parser("restore"); p.add_argument("file")
    args = parser.parse_args(argv)
    try:
        if args.cmd == "restore":  # file errors before touching the bus
            snap = read_snapshot(args.file)
        with BusClient(args.bus) as client:
            if args.cmd == "get":
                return cmd_get(client, args.name)
            if args.cmd == "put":
                if not args.value:
                    parser.error("put needs at least one value")
                return cmd_put(client, args.name, args.value)
            if args.cmd == "monitor":
                return cmd_monitor(client, args.name, args.count)
            if args.cmd == "save":
                return cmd_save(client, args.glob, args.out, args.optics_name)
            applied, failed = restore_to_bus(client, snap)
            print(f"restored {applied} channels from {args.file}", file=sys.stderr)
            if failed:
                print(f"{failed} channels failed to restore", file=sys.stderr)
            return 0 if not failed else 1
    except (RingdError, OSError) as exc:
        return _fail(exc)


# -- servers ---------------------------------------------------------------------


def main_bus(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ringd-bus", description="standalone channel bus")
    _bus_flag(parser)
    args = parser.parse_args(argv)
    host, port = resolve_addr(args.bus)
    server = WireServer(SoftBus(), host=host, port=port)
    try:
        server.start()
    except RingdError as exc:
        return _fail(exc)
    print(f"bus listening on {server.addr}", file=sys.stderr)
    stop = threading.Event()
    _wait_interrupt(stop)
    server.stop()
    return 0


def main_sim(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ringd-sim", description="storage ring simulator")
    _bus_flag(parser)
    parser.add_argument("--config", default=None, help="RingConfig key/value file")
    parser.add_argument("--speedup", type=float, default=1.0,
                        help="simulated seconds per wall second factor")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config) if args.config else RingConfig()
        ring = Ring(config)
        host, port = resolve_addr(args.bus)
        server = WireServer(ring.bus, host=host, port=port)
        server.start()
    except (RingdError, OSError) as exc:
        return _fail(exc)
    print(f"simulator serving on {server.addr} (dt={config.dt}s x{args.speedup})",
          file=sys.stderr)
    try:
        ring.run(speedup=args.speedup)
    except KeyboardInterrupt:
        pass
    finally:
        ring.stop()
        server.stop()
    return 0


def main_lifetime(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ringd-lifetime", description="beam lifetime engine")
    _bus_flag(parser)
    parser.add_argument("--window", type=int, default=30, help="samples per fit window")
    args = parser.parse_args(argv)
    engine = LifetimeEngine(args.bus, window=args.window)
    thread = threading.Thread(target=engine.run, daemon=True)
    thread.start()
    _wait_interrupt(engine._stop)
    engine.stop()
    thread.join(timeout=5.0)
    return 0


def main_ofb(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ringd-ofb", description="slow orbit feedback")
    _bus_flag(parser)
    parser.add_argument("--response", required=True, help="response snapshot file")
    parser.add_argument("--period", type=float, default=1.0, help="loop period [s]")
    parser.add_argument("--mode", default="stopped",
                        choices=[m.lower() for m in MODES])
    parser.add_argument("--plane", default="x", choices=["x", "y"])
    parser.add_argument("--gain", type=float, default=1.0)
    parser.add_argument("--f-step", type=float, default=10.0, help="[Hz]")
    args = parser.parse_args(argv)
    try:
        response = load_response(args.response)
        server = OfbServer(response, addr=args.bus, plane=args.plane,
                           period=args.period, f_step=args.f_step, gain=args.gain)
        server.start(args.mode.upper())
    except (RingdError, OSError) as exc:
        return _fail(exc)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    _wait_interrupt(server._stop)
    server.shutdown()
    thread.join(timeout=5.0)
    return 0


# -- optics ------------------------------------------------------------------------


def _parse_params(pairs) -> AdjustmentParams:
    kw = {}
    for pair in pairs or []:
        key, _, text = pair.partition("=")
        if not _ or key not in AdjustmentParams.__dataclass_fields__:
            raise ParseError(f"bad --param {pair!r} (want d_nu_x=0.01 style)")
        kw[key] = float(text)
    return AdjustmentParams(**kw)


def main_optics(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ringd-optics", description="physical-parameter magnet control")
    _bus_flag(parser)
    parser.add_argument("cmd", choices=["apply", "save", "restore", "infer", "serve"])
    parser.add_argument("--optics", default=None, help="optics snapshot file")
    parser.add_argument("--param", action="append", metavar="K=V",
                        help="adjustment parameter, repeatable")
    parser.add_argument("--file", default=None, help="snapshot path for save/restore")
    args = parser.parse_args(argv)
    try:
        if args.cmd in ("apply", "infer", "serve") and not args.optics:
            parser.error(f"{args.cmd} needs --optics")
        if args.cmd in ("save", "restore") and not args.file:
            parser.error(f"{args.cmd} needs --file")
        addr = args.bus
        if args.cmd == "serve":
            service = OpticsService(load_optics(args.optics), addr,
                                    params=_parse_params(args.param))
            thread = threading.Thread(target=service.run, daemon=True)
            thread.start()
            _wait_interrupt(service._stop)
            service.stop()
            thread.join(timeout=5.0)
            return 0
        with BusClient(addr) as client:
            if args.cmd == "apply":
                setup = load_optics(args.optics)
                ensure_param_channels(client, setup.name)
                apply(setup, _parse_params(args.param), client)
                return 0
            if args.cmd == "infer":
                result = infer_from_bus(load_optics(args.optics), client)
                for key, val in zip(AdjustmentParams.__dataclass_fields__,
                                    result.params.as_tuple()):
                    print(f"{key} {format_float(val)}")
                print(f"quad_residual {format_float(result.quad_residual)}")
                print(f"sext_residual {format_float(result.sext_residual)}")
                return 0
            if args.cmd == "save":
                return cmd_save(client, "ARIDI-*:SET", args.file)
            return cmd_restore(client, args.file)
    except (RingdError, OSError, ValueError) as exc:
        return _fail(exc)


# -- archiver ------------------------------------------------------------------------


def main_arch(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ringd-arch", description="channel archiver")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("record")
    _bus_flag(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("query")
    p.add_argument("--store", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--from", dest="t0", type=float, required=True)
    p.add_argument("--to", dest="t1", type=float, required=True)
    p.add_argument("--csv", default=None)
    args = parser.parse_args(argv)
    try:
        if args.cmd == "record":
            recorder = Recorder(args.bus, load_policy(args.policy),
                                args.out)
            stop = threading.Event()
            thread = threading.Thread(target=recorder.run, args=(stop,), daemon=True)
            thread.start()
            _wait_interrupt(stop)
            thread.join(timeout=5.0)
            print(f"{recorder.written} records in {args.out}", file=sys.stderr)
            return 0
        corrupt = []
        series = query(args.store, args.name, args.t0, args.t1, corrupt=corrupt)
        for offset, _ in corrupt:
            print(f"corrupt line at byte {offset}, skipped", file=sys.stderr)
        if args.csv:
            export_csv(series, args.csv, name=args.name, empty_ok=True)
        else:
            for rec in series:
                payload = rec.payload if rec.status == OK else \
                    f"{STATUS_TOKEN} {rec.payload}"
                print(f"{format_float(rec.t)} {payload}")
        return 0
    except (RingdError, OSError, ValueError) as exc:
        return _fail(exc)


# -- file generation -------------------------------------------------------------------


def main_gen(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ringd-gen",
        description="write optics and response files matching a ring config")
    parser.add_argument("--config", default=None)
    parser.add_argument("--name", default="nominal", help="optics setup name")
    parser.add_argument("--optics", default=None, help="optics file to write")
    parser.add_argument("--response-x", default=None)
    parser.add_argument("--response-y", default=None)
    args = parser.parse_args(argv)
    if not (args.optics or args.response_x or args.response_y):
        parser.error("nothing to write; pass --optics/--response-x/--response-y")
    try:
        config = load_config(args.config) if args.config else RingConfig()
        wrote = []
        if args.optics:
            write_optics(derive_setup(config, args.name), args.optics)
            wrote.append(args.optics)
        if args.response_x or args.response_y:
            model = derive_response(config)
            if args.response_x:
                write_response(args.response_x, model.R_x, model.eta_mm,
                               config.alpha_c, config.f0)
                wrote.append(args.response_x)
            if args.response_y:
                write_response(args.response_y, model.R_y)
                wrote.append(args.response_y)
        for path in wrote:
            print(f"wrote {path}", file=sys.stderr)
        return 0
    except (RingdError, OSError) as exc:
        return _fail(exc)
