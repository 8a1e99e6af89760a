// Session stream client: subscribes to the WebSocket, tracks the view state,
// and guards outgoing choices so an action outside the pending prediction set
// can never be submitted (mirror of the server-side guard).

import {
  ChooseActionMessage,
  FinishedEvent,
  HelpRequestEvent,
  SCHEMA_VERSION,
  ServerEvent,
  StateUpdateEvent,
  ValidationEvent,
  parseServerEvent,
} from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: "open" | "message" | "close", handler: (event: any) => void): void;
}

export type SocketFactory = (url: string) => SocketLike;

export type ConnectionStatus = "connecting" | "open" | "reconnecting" | "closed";

export interface ViewState {
  connection: ConnectionStatus;
  sessionStatus: "running" | "awaiting_help" | "finished" | null;
  lastUpdate: StateUpdateEvent | null;
  pendingHelp: HelpRequestEvent | null;
  lastValidation: ValidationEvent | null;
  finished: FinishedEvent | null;
  awaitingReply: boolean; // a choice was sent; input stays disabled until the next event
}

export function initialViewState(): ViewState {
  return {
    connection: "connecting",
    sessionStatus: null,
    lastUpdate: null,
    pendingHelp: null,
    lastValidation: null,
    finished: null,
    awaitingReply: false,
  };
}

export interface SessionClientOptions {
  socketFactory: SocketFactory;
  onChange: (state: ViewState) => void;
  reconnectDelayMs?: number | null; // null disables automatic reconnects
}

export class SessionClient {
  readonly url: string;
  state: ViewState;
  private socket: SocketLike | null = null;
  private readonly options: SessionClientOptions;
  private stopped = false;

  constructor(url: string, options: SessionClientOptions) {
    this.url = url;
    this.options = options;
    this.state = initialViewState();
  }

  connect(): void {
    this.socket = this.options.socketFactory(this.url);
    this.socket.addEventListener("open", () => {
      this.patch({ connection: "open" });
    });
    this.socket.addEventListener("message", (event: { data: unknown }) => {
      const parsed = parseServerEvent(String(event.data));
      if (parsed) this.handle(parsed);
    });
    this.socket.addEventListener("close", () => {
      if (this.stopped || this.state.finished) {
        this.patch({ connection: "closed" });
        return;
      }
      this.patch({ connection: "reconnecting" });
      const delay = this.options.reconnectDelayMs;
      if (delay !== null && delay !== undefined) {
        setTimeout(() => {
          if (!this.stopped) this.connect();
        }, delay);
      }
    });
  }

  close(): void {
    this.stopped = true;
    this.socket?.close();
  }

  handle(event: ServerEvent): void {
    switch (event.type) {
      case "state_update":
        this.patch({
          lastUpdate: event,
          sessionStatus: event.status,
          // the pending request is only valid while the server awaits help
          pendingHelp: event.status === "awaiting_help" ? this.state.pendingHelp : null,
          awaitingReply: false,
        });
        break;
      case "help_request":
        this.patch({ pendingHelp: event, lastValidation: null, awaitingReply: false });
        break;
      case "validation":
        // Stale or invalid choice: keep (re-show) the pending request.
        this.patch({ lastValidation: event, awaitingReply: false });
        break;
      case "finished":
        this.patch({ finished: event, sessionStatus: "finished", pendingHelp: null, awaitingReply: false });
        break;
      case "error":
        this.patch({ connection: "closed" });
        break;
    }
  }

  /** Sends a choice only when it targets the pending step and lies inside the
   * prediction set; returns whether the message was sent. */
  chooseAction(step: number, actionIndex: number): boolean {
    const pending = this.state.pendingHelp;
    if (
      !this.socket ||
      this.state.awaitingReply ||
      this.state.finished ||
      !pending ||
      pending.step !== step ||
      !pending.prediction_set.includes(actionIndex)
    ) {
      return false;
    }
    const message: ChooseActionMessage = {
      v: SCHEMA_VERSION,
      type: "choose_action",
      step,
      action_index: actionIndex,
    };
    this.socket.send(JSON.stringify(message));
    this.patch({ awaitingReply: true });
    return true;
  }

  abort(): void {
    this.socket?.send(JSON.stringify({ v: SCHEMA_VERSION, type: "abort" }));
  }

  private patch(partial: Partial<ViewState>): void {
    this.state = { ...this.state, ...partial };
    this.options.onChange(this.state);
  }
}
