// Shared plumbing for tests that spawn the control-system daemons and
// drive the bridge over a real WebSocket.

import { ChildProcess, spawn } from "child_process";
import WebSocket from "ws";
import { frameToJson } from "../src/frames";

export interface Daemon {
  proc: ChildProcess;
  host: string;
  port: number;
  stderr: string;
}

const BANNER = /(?:listening|serving) on ([\d.]+):(\d+)/;

// Start a daemon and wait for its startup banner on stderr, which names
// the actually bound address (port 0 friendly).
export function spawnDaemon(cmd: string, args: string[]): Promise<Daemon> {
  return new Promise((resolve, reject) => {
    const proc = spawn(cmd, args, { stdio: ["ignore", "ignore", "pipe"] });
    const d: Daemon = { proc, host: "", port: 0, stderr: "" };
    let settled = false;
    proc.stderr!.on("data", (chunk) => {
      d.stderr += chunk.toString();
      const m = d.stderr.match(BANNER);
      if (m && !settled) {
        settled = true;
        d.host = m[1];
        d.port = parseInt(m[2], 10);
        resolve(d);
      }
    });
    proc.on("error", (err) => {
      if (!settled) {
        settled = true;
        reject(err);
      }
    });
    proc.on("exit", (code) => {
      if (!settled) {
        settled = true;
        reject(new Error(`${cmd} exited with ${code} before banner:\n${d.stderr}`));
      }
    });
  });
}

export function stopDaemon(d: Daemon | null, signal: NodeJS.Signals = "SIGINT"): Promise<void> {
  return new Promise((resolve) => {
    if (!d || d.proc.exitCode !== null || d.proc.signalCode !== null) {
      resolve();
      return;
    }
    const killTimer = setTimeout(() => d.proc.kill("SIGKILL"), 3000);
    d.proc.once("exit", () => {
      clearTimeout(killTimer);
      resolve();
    });
    d.proc.kill(signal);
  });
}

export function runTool(cmd: string, args: string[]): Promise<{ code: number; out: string; err: string }> {
  return new Promise((resolve, reject) => {
    const proc = spawn(cmd, args, { stdio: ["ignore", "pipe", "pipe"] });
    let out = "";
    let err = "";
    proc.stdout!.on("data", (c) => { out += c.toString(); });
    proc.stderr!.on("data", (c) => { err += c.toString(); });
    proc.on("error", reject);
    proc.on("exit", (code) => resolve({ code: code ?? -1, out, err }));
  });
}

export function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}

type Pred = (frame: any) => boolean;

// WebSocket client that records every bridge frame and lets tests wait
// for specific ones.
export class WsHarness {
  frames: any[] = [];
  private waiters: { pred: Pred; resolve: (f: any) => void }[] = [];
  private seq = 0;
  closed = false;

  private constructor(public ws: WebSocket) {
    ws.on("message", (data) => {
      const frame = JSON.parse(data.toString());
      this.frames.push(frame);
      this.waiters = this.waiters.filter((w) => {
        if (w.pred(frame)) {
          w.resolve(frame);
          return false;
        }
        return true;
      });
    });
    ws.on("close", () => { this.closed = true; });
  }

  static connect(url: string): Promise<WsHarness> {
    return new Promise((resolve, reject) => {
      const ws = new WebSocket(url);
      ws.once("open", () => resolve(new WsHarness(ws)));
      ws.once("error", reject);
    });
  }

  send(frame: Record<string, unknown>): void {
    this.ws.send(frameToJson(frame));
  }

  // Wait for the next frame matching pred; scans history from `from`.
  until(pred: Pred, timeoutMs = 10000, from = 0): Promise<any> {
    for (let i = from; i < this.frames.length; i++) {
      if (pred(this.frames[i])) return Promise.resolve(this.frames[i]);
    }
    return new Promise((resolve, reject) => {
      const timer = setTimeout(
        () => reject(new Error(`timeout waiting for frame (have ${this.frames.length})`)),
        timeoutMs);
      this.waiters.push({
        pred,
        resolve: (f) => {
          clearTimeout(timer);
          resolve(f);
        },
      });
    });
  }

  // Send a request and wait for the seq-tagged reply (ok, value,
  // channel-list, or error).
  async request(frame: Record<string, unknown>, timeoutMs = 10000): Promise<any> {
    const seq = ++this.seq;
    this.send({ ...frame, seq });
    return this.until((f) => f.seq === seq, timeoutMs);
  }

  async put(name: string, value: unknown): Promise<any> {
    const reply = await this.request({ kind: "put", name, value });
    if (reply.kind !== "ok") {
      throw new Error(`put ${name} failed: ${JSON.stringify(reply)}`);
    }
    return reply;
  }

  async get(name: string): Promise<any> {
    const reply = await this.request({ kind: "get", name });
    if (reply.kind !== "value") {
      throw new Error(`get ${name} failed: ${JSON.stringify(reply)}`);
    }
    return reply;
  }

  close(): void {
    this.ws.close();
  }
}

// Poll an async probe until it returns true.
export async function waitFor(probe: () => Promise<boolean> | boolean,
                              timeoutMs = 20000, stepMs = 100): Promise<void> {
  const t0 = Date.now();
  for (;;) {
    if (await probe()) return;
    if (Date.now() - t0 > timeoutMs) throw new Error("waitFor timeout");
    await sleep(stepMs);
  }
}
