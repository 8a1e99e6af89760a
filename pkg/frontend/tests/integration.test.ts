// Live equivalence test against the real Python service.
//
// A scripted client that always picks the ground-truth action must reproduce
// the oracle-help rollout outcome, on 20 seeded sessions. References come
// from the service package's single-scenario debug command; sessions run over
// real HTTP + WebSocket through the production SessionClient, and on every
// help request the test additionally verifies the client refuses out-of-set
// submissions.

import { execFileSync, spawn, ChildProcess } from "node:child_process";
import { existsSync } from "node:fs";
import path from "node:path";
import { fileURLToPath } from "node:url";
import WebSocket from "ws";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { SessionClient } from "../src/client.js";

const FRONTEND_ROOT = path.dirname(path.dirname(fileURLToPath(import.meta.url)));
const FIXTURE = path.join(FRONTEND_ROOT, ".fixture");
const PORT = 8911;
const BASE = `http://127.0.0.1:${PORT}`;
const SEEDS = Array.from({ length: 20 }, (_, i) => 20_000 + i);

let server: ChildProcess | null = null;

interface ReferenceStep {
  t: number;
  prediction_set: number[];
  help_requested: boolean;
  executed: number | null;
  source: string | null;
}

interface ReferenceTrace {
  outcome: string;
  steps_taken: number;
  steps: ReferenceStep[];
}

function referenceTrace(seed: number): ReferenceTrace {
  const out = execFileSync(
    "python3",
    [
      "-m",
      "confplan.cli",
      "rollout",
      "--config",
      path.join(FIXTURE, "config.json"),
      "--checkpoint",
      path.join(FIXTURE, "runs", "cofinellm-seed0", "ckpt_final.npz"),
      "--threshold",
      path.join(FIXTURE, "runs", "cofinellm-seed0", "threshold.json"),
      "--scenario-seed",
      String(seed),
      "--tag",
      "D",
      "--compact",
    ],
    { encoding: "utf-8" },
  );
  return JSON.parse(out) as ReferenceTrace;
}

async function waitForServer(): Promise<void> {
  for (let attempt = 0; attempt < 120; attempt += 1) {
    try {
      const response = await fetch(`${BASE}/sessions/nonexistent`);
      if (response.status === 404) return;
    } catch {
      // not up yet
    }
    await new Promise((resolve) => setTimeout(resolve, 500));
  }
  throw new Error("service did not come up");
}

beforeAll(async () => {
  execFileSync("bash", [path.join(FRONTEND_ROOT, "scripts", "make_fixture.sh")], {
    stdio: "inherit",
  });
  expect(existsSync(path.join(FIXTURE, "ready"))).toBe(true);
  server = spawn(
    "python3",
    [
      "-m",
      "confplan.cli",
      "serve",
      "--config",
      path.join(FIXTURE, "config.json"),
      "--checkpoint",
      path.join(FIXTURE, "runs", "cofinellm-seed0", "ckpt_final.npz"),
      "--threshold",
      path.join(FIXTURE, "runs", "cofinellm-seed0", "threshold.json"),
      "--port",
      String(PORT),
    ],
    { stdio: "ignore" },
  );
  await waitForServer();
});

afterAll(() => {
  server?.kill();
});

async function runScriptedSession(seed: number, reference: ReferenceTrace) {
  const response = await fetch(`${BASE}/sessions`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify({ seed }),
  });
  expect(response.ok).toBe(true);
  const { session_id } = (await response.json()) as { session_id: string };

  const executedBystep = new Map<number, number>();
  for (const step of reference.steps) {
    if (step.executed !== null) executedBystep.set(step.t, step.executed);
  }

  return await new Promise<{ outcome: string; steps_taken: number }>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error(`session for seed ${seed} timed out`)), 60_000);
    const client: SessionClient = new SessionClient(`ws://127.0.0.1:${PORT}/sessions/${session_id}/ws`, {
      socketFactory: (url) => new WebSocket(url) as any,
      reconnectDelayMs: null,
      onChange: (state) => {
        try {
          if (state.pendingHelp && !state.awaitingReply) {
            const pending = state.pendingHelp;
            // guard check: an out-of-set action must be refused client-side
            const outside = [0, 1, 2, 3, 4, 5].find((a) => !pending.prediction_set.includes(a));
            if (outside !== undefined) {
              expect(client.chooseAction(pending.step, outside)).toBe(false);
            }
            const truth = executedBystep.get(pending.step);
            if (truth === undefined) {
              // reference halted here: nothing a helper could legally answer
              client.abort();
              return;
            }
            expect(pending.prediction_set).toContain(truth);
            expect(client.chooseAction(pending.step, truth)).toBe(true);
          }
          if (state.finished) {
            clearTimeout(timer);
            client.close();
            resolve({ outcome: state.finished.outcome, steps_taken: state.finished.steps_taken });
          }
        } catch (err) {
          clearTimeout(timer);
          client.close();
          reject(err);
        }
      },
    });
    client.connect();
  });
}

describe("scripted ground-truth client vs oracle rollout", () => {
  it("reproduces the oracle outcome on 20 seeded sessions", async () => {
    let successes = 0;
    for (const seed of SEEDS) {
      const reference = referenceTrace(seed);
      const result = await runScriptedSession(seed, reference);
      expect(result.outcome, `seed ${seed}`).toBe(reference.outcome);
      expect(result.steps_taken, `seed ${seed}`).toBe(reference.steps_taken);
      if (result.outcome === "success") successes += 1;
    }
    // the fixture model is competent enough that most missions succeed
    expect(successes).toBeGreaterThanOrEqual(15);
  }, 600_000);
});
