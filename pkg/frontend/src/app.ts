// Browser entry point: start a session against the service and run the live view.

import { SessionClient } from "./client.js";
import { render } from "./view.js";

function wsUrl(baseUrl: string, sessionId: string): string {
  const url = new URL(baseUrl);
  url.protocol = url.protocol === "https:" ? "wss:" : "ws:";
  url.pathname = `/sessions/${sessionId}/ws`;
  return url.toString();
}

async function startSession(baseUrl: string, seed: number | null, root: HTMLElement): Promise<SessionClient> {
  const response = await fetch(new URL("/sessions", baseUrl), {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(seed === null ? {} : { seed }),
  });
  if (!response.ok) throw new Error(`session start failed: ${response.status}`);
  const body = (await response.json()) as { session_id: string };
  const client = new SessionClient(wsUrl(baseUrl, body.session_id), {
    socketFactory: (url) => new WebSocket(url),
    onChange: (state) =>
      render(root, state, {
        onChoose: (step, index) => client.chooseAction(step, index),
        onAbort: () => client.abort(),
      }),
    reconnectDelayMs: 1000,
  });
  client.connect();
  return client;
}

function main(): void {
  const root = document.querySelector<HTMLElement>("#app");
  const form = document.querySelector<HTMLFormElement>("#session-form");
  if (!root || !form) return;
  let client: SessionClient | null = null;
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const server = (form.querySelector("#server-url") as HTMLInputElement).value;
    const seedRaw = (form.querySelector("#seed") as HTMLInputElement).value.trim();
    const seed = seedRaw === "" ? null : Number(seedRaw);
    client?.close();
    startSession(server, seed, root)
      .then((c) => {
        client = c;
      })
      .catch((err) => {
        root.textContent = String(err);
      });
  });
}

main();
