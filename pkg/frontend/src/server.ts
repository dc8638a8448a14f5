// Console server: serves the static UI, upgrades /ws to a bridge session,
// and answers /hist strip-chart backfill queries by shelling out to the
// archiver CLI when a store is configured.

import { execFile } from "child_process";
import * as fs from "fs";
import * as http from "http";
import * as path from "path";
import { WebSocketServer, WebSocket } from "ws";
import { BridgeSession } from "./bridge";
import { INVALID_TOKEN, parsePayload } from "./frames";

const DEFAULT_BUS = "127.0.0.1:5064";
const MIME: Record<string, string> = {
  ".html": "text/html; charset=utf-8",
  ".js": "text/javascript; charset=utf-8",
  ".css": "text/css; charset=utf-8",
  ".ico": "image/x-icon",
};

export function resolveBusAddr(flag?: string): { host: string; port: number } {
  const text = flag || process.env.RINGD_BUS_ADDR || DEFAULT_BUS;
  const i = text.lastIndexOf(":");
  if (i <= 0) throw new Error(`bad bus address: ${text}`);
  const port = parseInt(text.slice(i + 1), 10);
  if (!Number.isInteger(port) || port < 0 || port > 65535) {
    throw new Error(`bad bus address: ${text}`);
  }
  return { host: text.slice(0, i), port };
}

// "<t> [!INVALID] <payload>" lines from the archiver query subcommand.
export function parseHistOutput(text: string): { t: number; value: unknown; invalid: boolean }[] {
  const rows: { t: number; value: unknown; invalid: boolean }[] = [];
  for (const line of text.split("\n")) {
    if (line === "") continue;
    const sp = line.indexOf(" ");
    const t = Number(sp < 0 ? line : line.slice(0, sp));
    if (!Number.isFinite(t)) continue;
    let rest = sp < 0 ? "" : line.slice(sp + 1);
    let invalid = false;
    if (rest === INVALID_TOKEN || rest.startsWith(INVALID_TOKEN + " ")) {
      invalid = true;
      rest = rest === INVALID_TOKEN ? "" : rest.slice(INVALID_TOKEN.length + 1);
    }
    rows.push({ t, value: parsePayload(rest), invalid });
  }
  return rows;
}

export interface ServerOptions {
  bus: { host: string; port: number };
  httpPort: number;
  store?: string;
  publicDir?: string;
}

export function createConsoleServer(opts: ServerOptions): http.Server {
  const publicDir = opts.publicDir ?? path.join(__dirname, "..", "public");

  const server = http.createServer((req, res) => {
    const url = new URL(req.url ?? "/", "http://x");
    if (url.pathname === "/hist") {
      handleHist(url, res, opts.store);
      return;
    }
    const rel = url.pathname === "/" ? "index.html" : url.pathname.slice(1);
    const file = path.join(publicDir, rel);
    if (!file.startsWith(publicDir) || !fs.existsSync(file) || !fs.statSync(file).isFile()) {
      res.writeHead(404);
      res.end("not found");
      return;
    }
    res.writeHead(200, { "content-type": MIME[path.extname(file)] ?? "application/octet-stream" });
    fs.createReadStream(file).pipe(res);
  });

  const wss = new WebSocketServer({ noServer: true });
  server.on("upgrade", (req, socket, head) => {
    const url = new URL(req.url ?? "/", "http://x");
    if (url.pathname !== "/ws") {
      socket.destroy();
      return;
    }
    wss.handleUpgrade(req, socket, head, (ws: WebSocket) => {
      const session = new BridgeSession(
        { send: (data) => ws.send(data) }, opts.bus.host, opts.bus.port);
      void session.start();
      ws.on("message", (data) => void session.handleMessage(data.toString()));
      ws.on("close", () => session.close());
      ws.on("error", () => session.close());
    });
  });

  return server;
}

function handleHist(url: URL, res: http.ServerResponse, store?: string): void {
  const name = url.searchParams.get("name");
  if (!store || !name) {
    res.writeHead(404, { "content-type": "application/json" });
    res.end(JSON.stringify({ error: store ? "missing name" : "no archive store" }));
    return;
  }
  const t0 = url.searchParams.get("t0") ?? "0";
  const t1 = url.searchParams.get("t1") ?? "1e18";
  execFile(
    "ringd-arch",
    ["query", "--store", store, "--name", name, "--from", t0, "--to", t1],
    { maxBuffer: 64 * 1024 * 1024 },
    (err, stdout) => {
      if (err) {
        res.writeHead(502, { "content-type": "application/json" });
        res.end(JSON.stringify({ error: String(err) }));
        return;
      }
      res.writeHead(200, { "content-type": "application/json" });
      res.end(JSON.stringify(parseHistOutput(stdout)));
    });
}

function parseArgs(argv: string[]): { bus?: string; httpPort: number; store?: string } {
  const out: { bus?: string; httpPort: number; store?: string } = { httpPort: 8080 };
  for (let i = 0; i < argv.length; i++) {
    switch (argv[i]) {
      case "--bus":
        out.bus = argv[++i];
        break;
      case "--http-port":
        out.httpPort = parseInt(argv[++i], 10);
        break;
      case "--store":
        out.store = argv[++i];
        break;
      default:
        throw new Error(`unknown argument: ${argv[i]}`);
    }
  }
  if (!Number.isInteger(out.httpPort) || out.httpPort < 0 || out.httpPort > 65535) {
    throw new Error("bad --http-port");
  }
  return out;
}

export function main(argv = process.argv.slice(2)): void {
  let args;
  let bus;
  try {
    args = parseArgs(argv);
    bus = resolveBusAddr(args.bus);
  } catch (err: any) {
    console.error(err.message);
    process.exit(2);
  }
  const server = createConsoleServer({ bus, httpPort: args.httpPort, store: args.store });
  server.on("error", (err) => {
    console.error(`bind failed: ${err.message}`);
    process.exit(1);
  });
  server.listen(args.httpPort, "127.0.0.1", () => {
    const addr = server.address();
    const port = typeof addr === "object" && addr ? addr.port : args.httpPort;
    console.error(`console listening on http://127.0.0.1:${port} (bus ${bus.host}:${bus.port})`);
  });
  const shutdown = () => {
    server.close();
    process.exit(0);
  };
  process.on("SIGINT", shutdown);
  process.on("SIGTERM", shutdown);
}

if (require.main === module) {
  main();
}
