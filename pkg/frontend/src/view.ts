// DOM rendering: a pure function of the view state. The whole console is
// rebuilt on every change, so what is on screen always equals the last events.

import { ViewState } from "./client.js";
import { DEFAULT_ACTION_NAMES, GridSnapshot } from "./protocol.js";

export interface ViewHandlers {
  onChoose(step: number, actionIndex: number): void;
  onAbort(): void;
}

const DIR_GLYPH: Record<string, string> = { north: "↑", east: "→", south: "↓", west: "←" };
const KIND_GLYPH: Record<string, string> = {
  key: "K",
  ball: "B",
  box: "X",
  door: "D",
  cone: "C",
  hydrant: "H",
  car: "R",
};

export function render(root: HTMLElement, state: ViewState, handlers: ViewHandlers): void {
  root.textContent = "";
  root.appendChild(banner(state));
  const update = state.lastUpdate;
  if (!update) return;

  const mission = el("div", "mission");
  mission.textContent = `Mission: ${update.mission}`;
  root.appendChild(mission);

  const grid = state.pendingHelp ? state.pendingHelp.grid : update.grid;
  root.appendChild(renderGrid(grid));
  root.appendChild(renderHistory(update.history, update.action_names));
  root.appendChild(renderHelpPanel(state, handlers));

  if (state.pendingHelp) {
    const prompt = el("details", "prompt");
    const summary = el("summary");
    summary.textContent = "Prompt shown to the policy";
    const pre = el("pre");
    pre.textContent = state.pendingHelp.prompt_text;
    prompt.appendChild(summary);
    prompt.appendChild(pre);
    root.appendChild(prompt);
  }
}

function banner(state: ViewState): HTMLElement {
  const node = el("div", "banner");
  if (state.finished) {
    node.classList.add(`outcome-${state.finished.outcome}`);
    node.textContent = `Finished: ${state.finished.outcome} after ${state.finished.steps_taken} step(s)`;
  } else if (state.connection === "reconnecting") {
    node.classList.add("reconnect");
    node.textContent = "Connection lost - reconnecting...";
  } else if (state.connection === "connecting") {
    node.textContent = "Connecting...";
  } else if (state.sessionStatus === "awaiting_help") {
    node.classList.add("help");
    node.textContent = "Help requested: pick one of the highlighted actions";
  } else {
    node.textContent = "Planner running";
  }
  return node;
}

export function renderGrid(grid: GridSnapshot): HTMLElement {
  const byCell = new Map<string, { kind: string; color: string }>();
  for (const cell of grid.cells) byCell.set(`${cell.x},${cell.y}`, cell);
  const table = el("table", "grid") as HTMLTableElement;
  for (let y = 0; y < grid.height; y += 1) {
    const row = table.insertRow();
    for (let x = 0; x < grid.width; x += 1) {
      const td = row.insertCell();
      const isWall = x === 0 || y === 0 || x === grid.width - 1 || y === grid.height - 1;
      if (isWall) {
        td.className = "wall";
        continue;
      }
      const obj = byCell.get(`${x},${y}`);
      if (obj) {
        td.className = `object color-${obj.color}`;
        td.textContent = KIND_GLYPH[obj.kind] ?? "?";
        td.title = `${obj.color} ${obj.kind}`;
      }
      if (grid.agent.x === x && grid.agent.y === y) {
        td.className = "agent";
        td.textContent = DIR_GLYPH[grid.agent.dir] ?? "@";
        if (grid.carrying) td.title = `carrying ${grid.carrying.color} ${grid.carrying.kind}`;
      }
    }
  }
  return table;
}

function renderHistory(history: number[], names: string[]): HTMLElement {
  const wrap = el("div", "history");
  const title = el("div", "history-title");
  title.textContent = `Previous steps (${history.length})`;
  wrap.appendChild(title);
  const list = el("ol");
  for (const index of history) {
    const item = el("li");
    item.textContent = names[index] ?? String(index);
    list.appendChild(item);
  }
  wrap.appendChild(list);
  return wrap;
}

function renderHelpPanel(state: ViewState, handlers: ViewHandlers): HTMLElement {
  const panel = el("div", "help-panel");
  const pending = state.pendingHelp;
  const names = state.lastUpdate?.action_names ?? DEFAULT_ACTION_NAMES;
  const locked = Boolean(state.finished) || state.awaitingReply || !pending;

  if (state.lastValidation) {
    const note = el("div", "validation");
    note.textContent = `Rejected: ${state.lastValidation.reason}`;
    panel.appendChild(note);
  }

  // Rows sorted by confidence, most confident first; all six actions are
  // always shown, but only the prediction-set members are ever clickable.
  const order = names.map((_, i) => i);
  if (pending) {
    order.sort((a, b) => pending.confidences[b] - pending.confidences[a]);
  }
  for (const index of order) {
    const row = el("div", "action-row");
    const button = el("button", "action") as HTMLButtonElement;
    button.textContent = `${index}: ${names[index]}`;
    button.dataset.action = String(index);
    const inSet = Boolean(pending && pending.prediction_set.includes(index));
    button.disabled = locked || !inSet;
    if (pending && !locked && inSet) {
      const step = pending.step;
      button.addEventListener("click", () => handlers.onChoose(step, index));
    }
    row.appendChild(button);
    if (pending) {
      row.appendChild(confidenceBar(pending.confidences[index], pending.delta, inSet));
    }
    panel.appendChild(row);
  }

  const abort = el("button", "abort") as HTMLButtonElement;
  abort.textContent = "Abort session";
  abort.disabled = Boolean(state.finished);
  abort.addEventListener("click", () => handlers.onAbort());
  panel.appendChild(abort);
  return panel;
}

function confidenceBar(value: number, delta: number, inSet: boolean): HTMLElement {
  const bar = el("div", "bar");
  const fill = el("div", inSet ? "bar-fill in-set" : "bar-fill");
  fill.style.width = `${(100 * value).toFixed(1)}%`;
  fill.title = value.toFixed(4);
  const threshold = el("div", "bar-delta");
  threshold.style.left = `${(100 * delta).toFixed(1)}%`;
  threshold.title = `threshold ${delta.toFixed(4)}`;
  const label = el("span", "bar-label");
  label.textContent = value.toFixed(3);
  bar.appendChild(fill);
  bar.appendChild(threshold);
  bar.appendChild(label);
  return bar;
}

function el(tag: string, className?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  return node;
}
