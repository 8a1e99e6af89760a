import { describe, expect, it } from "vitest";

import { SessionClient, ViewState } from "../src/client.js";
import { FakeSocket, finished, helpRequest, stateUpdate, validation } from "./helpers.js";

function makeClient() {
  const socket = new FakeSocket();
  const states: ViewState[] = [];
  const client = new SessionClient("ws://test/sessions/s1/ws", {
    socketFactory: () => socket,
    onChange: (state) => states.push(state),
    reconnectDelayMs: null,
  });
  client.connect();
  return { client, socket, states };
}

describe("session client state machine", () => {
  it("tracks state updates and pending help", () => {
    const { client, socket } = makeClient();
    socket.emit("open");
    socket.emitMessage(stateUpdate());
    socket.emitMessage(helpRequest());
    expect(client.state.connection).toBe("open");
    expect(client.state.sessionStatus).toBe("awaiting_help");
    expect(client.state.pendingHelp?.prediction_set).toEqual([0, 2]);
  });

  it("clears pending help when the server is no longer awaiting", () => {
    const { client, socket } = makeClient();
    socket.emitMessage(stateUpdate());
    socket.emitMessage(helpRequest());
    socket.emitMessage(stateUpdate({ status: "running", step: 3 }));
    expect(client.state.pendingHelp).toBeNull();
  });

  it("refuses to send actions outside the pending prediction set", () => {
    const { client, socket } = makeClient();
    socket.emitMessage(stateUpdate());
    socket.emitMessage(helpRequest({ prediction_set: [0, 2], step: 2 }));
    expect(client.chooseAction(2, 1)).toBe(false); // not in set
    expect(client.chooseAction(5, 0)).toBe(false); // stale step
    expect(socket.sent).toHaveLength(0);
    expect(client.chooseAction(2, 2)).toBe(true);
    expect(JSON.parse(socket.sent[0])).toEqual({
      v: 1,
      type: "choose_action",
      step: 2,
      action_index: 2,
    });
  });

  it("refuses to send without a pending request or after finishing", () => {
    const { client, socket } = makeClient();
    socket.emitMessage(stateUpdate({ status: "running" }));
    expect(client.chooseAction(2, 0)).toBe(false);
    socket.emitMessage(helpRequest());
    socket.emitMessage(finished());
    expect(client.chooseAction(2, 0)).toBe(false);
    expect(socket.sent).toHaveLength(0);
  });

  it("blocks double submission until the server replies", () => {
    const { client, socket } = makeClient();
    socket.emitMessage(stateUpdate());
    socket.emitMessage(helpRequest());
    expect(client.chooseAction(2, 0)).toBe(true);
    expect(client.chooseAction(2, 2)).toBe(false); // awaiting reply
    socket.emitMessage(validation({ reason: "stale step index" }));
    expect(client.state.lastValidation?.reason).toBe("stale step index");
    expect(client.state.pendingHelp).not.toBeNull(); // request still pending
    expect(client.chooseAction(2, 2)).toBe(true);
  });

  it("marks the connection for reconnect on close", () => {
    const { client, socket } = makeClient();
    socket.emit("open");
    socket.emit("close");
    expect(client.state.connection).toBe("reconnecting");
  });

  it("treats close after finish as terminal", () => {
    const { client, socket } = makeClient();
    socket.emitMessage(stateUpdate());
    socket.emitMessage(finished());
    socket.emit("close");
    expect(client.state.connection).toBe("closed");
  });
});
