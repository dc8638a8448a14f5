import { ConsoleApp } from "./console.js";
import { DEFAULT_PANELS } from "./panels.js";
const proto = location.protocol === "https:" ? "wss:" : "ws:";
const wsUrl = `${proto}//${location.host}/ws`;
new ConsoleApp(document.getElementById("app"), DEFAULT_PANELS, () => new WebSocket(wsUrl), { histBase: "" });
