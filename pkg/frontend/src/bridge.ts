// One bridge session per browser connection.
//
// Each WebSocket gets its own bus client, so sessions cannot see each
// other's monitors and a wedged browser only stalls itself. Requests
// are forwarded verbatim; replies carry the request's seq back so the
// panel code can correlate. When the bus drops, the session tells the
// browser, then retries with backoff and re-establishes its monitors.

import { BusClient } from "./busclient";
import { ClientFrame, ServerFrame, frameToJson } from "./frames";

const BACKOFF_START = 0.5; // [s]
const BACKOFF_MAX = 5.0; // [s]

export interface FrameSink {
  send(data: string): void;
}

export class BridgeSession {
  private bus = new BusClient();
  private monitored = new Set<string>();
  private retryTimer: NodeJS.Timeout | null = null;
  private backoff = BACKOFF_START;
  private closed = false;

  constructor(
    private sink: FrameSink,
    private host: string,
    private port: number,
  ) {}

  private emit(frame: ServerFrame): void {
    if (this.closed) return;
    try {
      this.sink.send(frameToJson(frame));
    } catch {
      // browser side already gone; close() follows shortly
    }
  }

  async start(): Promise<void> {
    await this.connectBus();
  }

  private async connectBus(): Promise<void> {
    if (this.closed) return;
    try {
      await this.bus.connect(this.host, this.port);
    } catch {
      this.scheduleRetry();
      return;
    }
    this.backoff = BACKOFF_START;
    this.bus.onEvent = (f) => this.emit(f);
    this.bus.onClose = () => {
      // error frame for anything the browser had in flight, then the
      // connection-state change itself
      this.emit({ kind: "error", name: "-", reason: "connection" });
      this.emit({ kind: "status", state: "disconnected", detail: "bus connection lost" });
      this.scheduleRetry();
    };
    // restore monitors from before the drop
    for (const name of this.monitored) {
      try {
        await this.bus.monitor(name);
      } catch {
        // channel may not exist yet after a bus restart; the browser
        // will see no events and can re-monitor
      }
    }
    this.emit({ kind: "status", state: "connected" });
  }

  private scheduleRetry(): void {
    if (this.closed || this.retryTimer) return;
    this.retryTimer = setTimeout(() => {
      this.retryTimer = null;
      void this.connectBus();
    }, this.backoff * 1000);
    this.backoff = Math.min(this.backoff * 2, BACKOFF_MAX);
  }

  async handleMessage(text: string): Promise<void> {
    let req: ClientFrame;
    try {
      req = JSON.parse(text);
    } catch {
      this.emit({ kind: "error", name: "-", reason: "parse-error" });
      return;
    }
    const seq = req.seq;
    if (!this.bus.connected) {
      this.emit({ kind: "error", name: "-", reason: "connection", seq });
      return;
    }
    try {
      switch (req.kind) {
        case "get": {
          const v = await this.bus.get(req.name);
          this.emit({ ...v, seq });
          break;
        }
        case "put":
          await this.bus.put(req.name, req.value, { ts: req.ts, invalid: req.invalid });
          this.emit({ kind: "ok", seq });
          break;
        case "monitor":
          await this.bus.monitor(req.name);
          this.monitored.add(req.name);
          this.emit({ kind: "ok", seq });
          break;
        case "unmonitor":
          await this.bus.unmonitor(req.name);
          this.monitored.delete(req.name);
          this.emit({ kind: "ok", seq });
          break;
        case "list": {
          const names = await this.bus.list(req.glob);
          this.emit({ kind: "channel-list", names, seq });
          break;
        }
        default:
          this.emit({ kind: "error", name: "-", reason: "bad-command", seq });
      }
    } catch (err: any) {
      const name = err.channel ?? "-";
      const reason = err.reason ?? "connection";
      this.emit({ kind: "error", name, reason, seq });
    }
  }

  close(): void {
    this.closed = true;
    if (this.retryTimer) {
      clearTimeout(this.retryTimer);
      this.retryTimer = null;
    }
    this.bus.onClose = null;
    this.bus.close();
  }
}
