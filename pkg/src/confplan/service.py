"""Interactive help-loop service.

Exposes REST endpoints to start and inspect rollout sessions plus a WebSocket
stream per session. When the policy's prediction set at a step is not a
singleton the session pauses and emits a help_request carrying the prompt
text, the grid snapshot, the prediction set, and the confidence scores; the
rollout resumes only after the client answers with an action inside the set.

Message schema (all payloads carry a "v" version field):
  server -> client: state_update, help_request, validation, finished, error
  client -> server: choose_action {step, action_index}, abort
"""

from __future__ import annotations

import itertools
import time
from typing import Callable, Optional

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from . import conformal
from .evaluation import RolloutEngine
from .gridworld import ACTION_NAMES, DIRECTION_NAMES, Environment, Scenario

SCHEMA_VERSION = 1
DISCONNECT_GRACE_SECONDS = 300.0


def grid_snapshot(env: Environment) -> dict:
    """Compact JSON cell array; rendering is the client's job."""
    return {
        "width": env.width,
        "height": env.height,
        "cells": [
            {"x": x, "y": y, "kind": o.kind, "color": o.color, "is_open": o.is_open}
            for (x, y), o in sorted(env.objects.items())
        ],
        "agent": {
            "x": env.agent_pos[0],
            "y": env.agent_pos[1],
            "dir": DIRECTION_NAMES[env.agent_dir],
        },
        "carrying": (
            {"kind": env.carrying.kind, "color": env.carrying.color}
            if env.carrying
            else None
        ),
    }


class Session:
    _ids = itertools.count(1)

    def __init__(self, model, threshold: conformal.Threshold, scenario: Scenario):
        self.id = f"s{next(Session._ids):06d}"
        self.scenario = scenario
        self.threshold = threshold
        self.engine = RolloutEngine(model, threshold, scenario)
        self.disconnected_at: Optional[float] = None
        self.engine.advance()

    @property
    def status(self) -> str:
        if self.engine.status == "finished":
            return "finished"
        return self.engine.status  # running | awaiting_help

    def expire_if_stale(self, now: Optional[float] = None) -> None:
        if self.engine.status == "finished" or self.disconnected_at is None:
            return
        now = time.time() if now is None else now
        if now - self.disconnected_at > DISCONNECT_GRACE_SECONDS:
            self.engine.abort()

    # -- events -------------------------------------------------------------

    def state_update_event(self) -> dict:
        eng = self.engine
        return {
            "v": SCHEMA_VERSION,
            "type": "state_update",
            "session_id": self.id,
            "status": self.status,
            "step": eng.t,
            "mission": self.scenario.task.mission_text,
            "grid": grid_snapshot(eng.env),
            "history": [int(a) for a in eng.history],
            "action_names": list(ACTION_NAMES),
            "outcome": eng.trace.outcome if eng.status == "finished" else None,
        }

    def help_request_event(self) -> dict:
        pend = self.engine.pending
        return {
            "v": SCHEMA_VERSION,
            "type": "help_request",
            "session_id": self.id,
            "step": pend["step"],
            "prompt_text": pend["prompt_text"],
            "grid": grid_snapshot(self.engine.env),
            "prediction_set": list(pend["prediction_set"]),
            "confidences": list(pend["confidences"]),
            "delta": self.threshold.delta,
        }

    def finished_event(self) -> dict:
        return {
            "v": SCHEMA_VERSION,
            "type": "finished",
            "session_id": self.id,
            "outcome": self.engine.trace.outcome,
            "steps_taken": self.engine.trace.steps_taken,
        }

    def validation_event(self, step: int, reason: str) -> dict:
        pend = self.engine.pending or {}
        return {
            "v": SCHEMA_VERSION,
            "type": "validation",
            "session_id": self.id,
            "step": step,
            "reason": reason,
            "prediction_set": list(pend.get("prediction_set", [])),
        }

    def pending_events(self) -> list[dict]:
        events = [self.state_update_event()]
        if self.engine.status == "awaiting_help":
            events.append(self.help_request_event())
        elif self.engine.status == "finished":
            events.append(self.finished_event())
        return events

    def handle_message(self, message: dict) -> list[dict]:
        """Applies one client message; returns the events to emit."""
        kind = message.get("type")
        if kind == "abort":
            self.engine.abort()
            return [self.state_update_event(), self.finished_event()]
        if kind != "choose_action":
            return [self.validation_event(self.engine.t, f"unknown message type {kind!r}")]
        if self.engine.status != "awaiting_help" or self.engine.pending is None:
            return [self.validation_event(self.engine.t, "no pending help request")]
        pend_step = self.engine.pending["step"]
        if message.get("step") != pend_step:
            return [self.validation_event(pend_step, "stale step index")]
        action = message.get("action_index")
        if not isinstance(action, int) or action not in self.engine.pending["prediction_set"]:
            return [self.validation_event(pend_step, "action outside the prediction set")]
        self.engine.provide_help(action)
        self.engine.advance()
        return self.pending_events()


def make_app(
    model,
    threshold: conformal.Threshold,
    scenario_source: Callable[[Optional[int]], Scenario],
) -> FastAPI:
    """scenario_source maps an optional client seed to a fresh Scenario."""
    app = FastAPI(title="confplan help console service")
    sessions: dict[str, Session] = {}
    app.state.sessions = sessions

    def get_session(session_id: str) -> Session:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session id")
        session.expire_if_stale()
        return session

    @app.post("/sessions")
    def create_session(body: Optional[dict] = None):
        seed = (body or {}).get("seed")
        scenario = scenario_source(seed)
        session = Session(model, threshold, scenario)
        sessions[session.id] = session
        return {
            "v": SCHEMA_VERSION,
            "session_id": session.id,
            "scenario_id": scenario.scenario_id,
            "status": session.status,
        }

    @app.get("/sessions/{session_id}")
    def session_snapshot(session_id: str):
        session = get_session(session_id)
        snapshot = session.state_update_event()
        snapshot["type"] = "snapshot"
        if session.engine.status == "awaiting_help":
            snapshot["pending_help"] = session.help_request_event()
        else:
            snapshot["pending_help"] = None
        return snapshot

    @app.websocket("/sessions/{session_id}/ws")
    async def session_stream(ws: WebSocket, session_id: str):
        await ws.accept()
        session = sessions.get(session_id)
        if session is None:
            await ws.send_json(
                {"v": SCHEMA_VERSION, "type": "error", "reason": "unknown session id"}
            )
            await ws.close()
            return
        session.expire_if_stale()
        session.disconnected_at = None
        try:
            for event in session.pending_events():
                await ws.send_json(event)
            while True:
                message = await ws.receive_json()
                for event in session.handle_message(message):
                    await ws.send_json(event)
        except WebSocketDisconnect:
            session.disconnected_at = time.time()

    return app
