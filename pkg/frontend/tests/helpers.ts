import {
  FinishedEvent,
  GridSnapshot,
  HelpRequestEvent,
  StateUpdateEvent,
  ValidationEvent,
} from "../src/protocol.js";

export const ACTION_NAMES = [
  "turn left",
  "turn right",
  "go forward",
  "pick up object",
  "drop object",
  "toggle",
];

export function grid(): GridSnapshot {
  return {
    width: 8,
    height: 8,
    cells: [
      { x: 2, y: 3, kind: "ball", color: "red", is_open: false },
      { x: 5, y: 5, kind: "key", color: "grey", is_open: false },
    ],
    agent: { x: 3, y: 3, dir: "north" },
    carrying: null,
  };
}

export function stateUpdate(partial: Partial<StateUpdateEvent> = {}): StateUpdateEvent {
  return {
    v: 1,
    type: "state_update",
    session_id: "s000001",
    status: "awaiting_help",
    step: 2,
    mission: "go to the red ball",
    grid: grid(),
    history: [0, 2],
    action_names: ACTION_NAMES,
    outcome: null,
    ...partial,
  };
}

export function helpRequest(partial: Partial<HelpRequestEvent> = {}): HelpRequestEvent {
  return {
    v: 1,
    type: "help_request",
    session_id: "s000001",
    step: 2,
    prompt_text: "Select an action by its corresponding number:\n0: turn left\n...",
    grid: grid(),
    prediction_set: [0, 2],
    confidences: [0.41, 0.04, 0.45, 0.04, 0.03, 0.03],
    delta: 0.2,
    ...partial,
  };
}

export function finished(partial: Partial<FinishedEvent> = {}): FinishedEvent {
  return {
    v: 1,
    type: "finished",
    session_id: "s000001",
    outcome: "success",
    steps_taken: 7,
    ...partial,
  };
}

export function validation(partial: Partial<ValidationEvent> = {}): ValidationEvent {
  return {
    v: 1,
    type: "validation",
    session_id: "s000001",
    step: 2,
    reason: "stale step index",
    prediction_set: [0, 2],
    ...partial,
  };
}

export class FakeSocket {
  sent: string[] = [];
  closed = false;
  private handlers: Record<string, Array<(event: any) => void>> = {};

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.closed = true;
  }

  addEventListener(type: string, handler: (event: any) => void): void {
    (this.handlers[type] ??= []).push(handler);
  }

  emit(type: string, event: any = {}): void {
    for (const handler of this.handlers[type] ?? []) handler(event);
  }

  emitMessage(payload: unknown): void {
    this.emit("message", { data: JSON.stringify(payload) });
  }
}
