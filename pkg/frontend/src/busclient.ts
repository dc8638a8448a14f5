// TCP client for the bus protocol.
//
// Replies are strictly ordered per connection, so a FIFO queue of pending
// resolvers pairs each reply with its request. EV frames interleave at
// any point and go to the monitor callback instead.

import * as net from "net";
import {
  ChannelListFrame, ChannelValue, ErrorFrame, OkFrame, ServerFrame,
  ValueFrame, parseWireLine, requestToWire,
} from "./frames";

type Reply = ValueFrame | OkFrame | ErrorFrame | ChannelListFrame;

interface Pending {
  resolve: (f: Reply) => void;
  reject: (e: Error) => void;
}

export class BusError extends Error {
  constructor(public channel: string, public reason: string) {
    super(`${channel}: ${reason}`);
  }
}

export class BusClient {
  private sock: net.Socket | null = null;
  private buf = "";
  private pending: Pending[] = [];
  private collectingList: ChannelListFrame | null = null;
  private listRemaining = 0;

  onEvent: ((f: ValueFrame) => void) | null = null;
  onClose: (() => void) | null = null;

  connect(host: string, port: number): Promise<void> {
    return new Promise((resolve, reject) => {
      const sock = net.connect(port, host);
      sock.setNoDelay(true);
      sock.once("connect", () => {
        sock.removeListener("error", reject);
        sock.on("error", () => { /* surfaced via close */ });
        this.sock = sock;
        resolve();
      });
      sock.once("error", reject);
      sock.on("data", (chunk) => this.feed(chunk.toString("utf8")));
      sock.on("close", () => {
        this.sock = null;
        this.failPending(new Error("connection closed"));
        if (this.onClose) this.onClose();
      });
    });
  }

  close(): void {
    const sock = this.sock;
    this.sock = null;
    this.onClose = null;
    if (sock) sock.destroy();
  }

  get connected(): boolean {
    return this.sock !== null;
  }

  private failPending(err: Error): void {
    const waiting = this.pending;
    this.pending = [];
    this.collectingList = null;
    for (const p of waiting) p.reject(err);
  }

  private feed(text: string): void {
    this.buf += text;
    let nl;
    while ((nl = this.buf.indexOf("\n")) >= 0) {
      const line = this.buf.slice(0, nl).replace(/\r$/, "");
      this.buf = this.buf.slice(nl + 1);
      if (line !== "") this.handleLine(line);
    }
  }

  private handleLine(line: string): void {
    if (this.collectingList) {
      this.collectingList.names.push(line);
      if (--this.listRemaining === 0) {
        const frame = this.collectingList;
        this.collectingList = null;
        this.settle(frame);
      }
      return;
    }
    const { frame, pendingNames } = parseWireLine(line);
    if (frame.kind === "event") {
      if (this.onEvent) this.onEvent(frame);
      return;
    }
    if (frame.kind === "channel-list" && pendingNames) {
      this.collectingList = frame;
      this.listRemaining = pendingNames;
      return;
    }
    this.settle(frame as Reply);
  }

  private settle(frame: Reply): void {
    const p = this.pending.shift();
    if (!p) throw new Error(`unsolicited reply: ${frame.kind}`);
    p.resolve(frame);
  }

  request(line: string): Promise<Reply> {
    if (!this.sock) return Promise.reject(new Error("not connected"));
    const done = new Promise<Reply>((resolve, reject) => {
      this.pending.push({ resolve, reject });
    });
    this.sock.write(line + "\n");
    return done;
  }

  private expectOk(reply: Reply): void {
    if (reply.kind === "error") throw new BusError(reply.name, reply.reason);
    if (reply.kind !== "ok") throw new Error(`unexpected ${reply.kind} reply`);
  }

  async get(name: string): Promise<ValueFrame> {
    const reply = await this.request(requestToWire({ kind: "get", name }));
    if (reply.kind === "error") throw new BusError(reply.name, reply.reason);
    if (reply.kind !== "value") throw new Error(`unexpected ${reply.kind} reply`);
    return reply;
  }

  async put(name: string, value: ChannelValue, opts: { ts?: number; invalid?: boolean } = {}): Promise<void> {
    this.expectOk(await this.request(
      requestToWire({ kind: "put", name, value, ...opts })));
  }

  async monitor(name: string): Promise<void> {
    this.expectOk(await this.request(requestToWire({ kind: "monitor", name })));
  }

  async unmonitor(name: string): Promise<void> {
    this.expectOk(await this.request(requestToWire({ kind: "unmonitor", name })));
  }

  async list(glob?: string): Promise<string[]> {
    const reply = await this.request(requestToWire({ kind: "list", glob }));
    if (reply.kind === "error") throw new BusError(reply.name, reply.reason);
    if (reply.kind !== "channel-list") throw new Error(`unexpected ${reply.kind} reply`);
    return reply.names;
  }

  // Channel creation is not part of the console surface, but the tests
  // need scratch channels to talk to.
  async newChannel(name: string, kind: "scalar" | "text" | number, ro = false): Promise<void> {
    const kindTok = kind === "scalar" ? "0" : kind === "text" ? "text" : String(kind);
    this.expectOk(await this.request(
      `NEW ${name} ${kindTok}${ro ? " ro" : ""}`));
  }
}
