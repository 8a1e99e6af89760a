// Message schema for the help-console service (version field "v" on every payload).

export const SCHEMA_VERSION = 1;

export interface GridCell {
  x: number;
  y: number;
  kind: string;
  color: string;
  is_open: boolean;
}

export interface GridSnapshot {
  width: number;
  height: number;
  cells: GridCell[];
  agent: { x: number; y: number; dir: string };
  carrying: { kind: string; color: string } | null;
}

export interface StateUpdateEvent {
  v: number;
  type: "state_update";
  session_id: string;
  status: "running" | "awaiting_help" | "finished";
  step: number;
  mission: string;
  grid: GridSnapshot;
  history: number[];
  action_names: string[];
  outcome: string | null;
}

export interface HelpRequestEvent {
  v: number;
  type: "help_request";
  session_id: string;
  step: number;
  prompt_text: string;
  grid: GridSnapshot;
  prediction_set: number[];
  confidences: number[];
  delta: number;
}

export interface FinishedEvent {
  v: number;
  type: "finished";
  session_id: string;
  outcome: "success" | "failure" | "halted" | "aborted";
  steps_taken: number;
}

export interface ValidationEvent {
  v: number;
  type: "validation";
  session_id: string;
  step: number;
  reason: string;
  prediction_set: number[];
}

export interface ErrorEvent {
  v: number;
  type: "error";
  reason: string;
}

export type ServerEvent =
  | StateUpdateEvent
  | HelpRequestEvent
  | FinishedEvent
  | ValidationEvent
  | ErrorEvent;

export interface ChooseActionMessage {
  v: number;
  type: "choose_action";
  step: number;
  action_index: number;
}

export interface AbortMessage {
  v: number;
  type: "abort";
}

export type ClientMessage = ChooseActionMessage | AbortMessage;

const EVENT_TYPES = new Set(["state_update", "help_request", "finished", "validation", "error"]);

export function parseServerEvent(data: string): ServerEvent | null {
  let parsed: unknown;
  try {
    parsed = JSON.parse(data);
  } catch {
    return null;
  }
  if (typeof parsed !== "object" || parsed === null) return null;
  const event = parsed as { type?: unknown };
  if (typeof event.type !== "string" || !EVENT_TYPES.has(event.type)) return null;
  return parsed as ServerEvent;
}

// Fallback menu used until the first state_update supplies the server's names.
export const DEFAULT_ACTION_NAMES = [
  "turn left",
  "turn right",
  "go forward",
  "pick up object",
  "drop object",
  "toggle",
];
