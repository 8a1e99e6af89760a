"""Prompt rendering and numeric feature encoding for policy inputs.

Every decision step is posed as a multiple-choice question: a textual prompt
(action menu, mission goal, egocentric observation, action history, answer
query) is rendered for logging and the UI, while the policy itself consumes a
fixed-size numeric feature vector describing the same state: the egocentric
grid window, carried-object and task descriptors, recent actions, the step
index, and a per-action progress summary (see action_progress) that plays the
role of the spatial competence a pretrained language backbone would otherwise
contribute. Both are pure functions of (environment, task, history, step
index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .gridworld import (
    ACTION_NAMES,
    COLORS,
    H_MAX,
    KINDS,
    Action,
    Direction,
    Environment,
    Scenario,
    Task,
    completion_lower_bound,
    restricted_plan_length,
    sample_scenario_with_plan,
    scenario_from_dict,
    scenario_to_dict,
    step,
)

# Egocentric window radius: covers every cell of the largest supported grid
# from any agent position (8x8 total grid -> max offset 7).
WINDOW_RADIUS = 7
WINDOW_SIDE = 2 * WINDOW_RADIUS + 1

# Per-cell channels: wall flag + kind one-hot + color one-hot.
CELL_CHANNELS = 1 + len(KINDS) + len(COLORS)

# Number of most recent actions one-hot encoded in the feature vector.
HISTORY_WINDOW = 4

# Normalization cap for the per-action progress distances.
PROGRESS_CAP = 48
PROGRESS_DIMS = 3 * len(Action)

FEATURE_DIM = (
    WINDOW_SIDE * WINDOW_SIDE * CELL_CHANNELS
    + (len(KINDS) + len(COLORS) + 1)          # carried object + present flag
    + 4                                        # task family
    + 2 * (len(KINDS) + len(COLORS))           # target descriptors a and b
    + HISTORY_WINDOW * len(Action)             # recent action history
    + 1                                        # normalized step index
    + PROGRESS_DIMS                            # per-action progress summary
)

_FAMILY_INDEX = {"GoTo": 0, "PickUp": 1, "PickUpThenGoTo": 2, "PutNext": 3}


@dataclass
class Prompt:
    text: str
    step_index: int
    history: tuple


@dataclass
class StepRecord:
    scenario_id: str
    t: int
    prompt: Prompt
    features: np.ndarray
    correct_action: Action


@dataclass
class DatasetEntry:
    scenario: Scenario
    plan: list
    records: list  # list[StepRecord]


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------

def _egocentric(env: Environment, x: int, y: int) -> tuple[int, int]:
    """World cell -> (forward, lateral) offsets in the agent frame.

    forward > 0 is ahead of the agent, lateral > 0 is to its right.
    """
    ax, ay = env.agent_pos
    dx, dy = x - ax, y - ay
    d = env.agent_dir
    if d == Direction.NORTH:
        return (-dy, dx)
    if d == Direction.SOUTH:
        return (dy, -dx)
    if d == Direction.EAST:
        return (dx, dy)
    return (-dx, -dy)  # WEST


def _offset_phrase(fwd: int, lat: int) -> str:
    parts = []
    if fwd != 0:
        word = "forward" if fwd > 0 else "back"
        n = abs(fwd)
        parts.append(f"{n} step{'s' if n != 1 else ''} {word}")
    if lat != 0:
        word = "right" if lat > 0 else "left"
        n = abs(lat)
        parts.append(f"{n} step{'s' if n != 1 else ''} {word}")
    return " and ".join(parts)


def observation_sentences(env: Environment) -> list[str]:
    """One sentence per visible wall or object cell, swept left-to-right then back-to-front."""
    entries = []
    for y in range(env.height):
        for x in range(env.width):
            if (x, y) == env.agent_pos:
                continue
            content = env.cell(x, y)
            if content is None:
                continue
            fwd, lat = _egocentric(env, x, y)
            desc = "a wall" if content == "wall" else f"a {content.color} {content.kind}"
            entries.append((lat, fwd, f"You see {desc} {_offset_phrase(fwd, lat)}."))
    entries.sort(key=lambda e: (e[0], e[1]))
    sentences = [text for _, _, text in entries]
    if env.carrying is not None:
        sentences.append(f"You carry a {env.carrying.color} {env.carrying.kind}.")
    return sentences


def render_prompt_state(env: Environment, task: Task, history: Sequence[Action], t: int) -> Prompt:
    lines = ["Select an action by its corresponding number:"]
    lines += [f"{a.value}: {ACTION_NAMES[a]}" for a in Action]
    lines.append("")
    lines.append(f"Goal of the agent: {task.mission_text}")
    lines.append("")
    lines.append("Observation: " + " ".join(observation_sentences(env)))
    lines.append("")
    lines.append("Previous Steps:")
    lines += [ACTION_NAMES[a] for a in history]
    lines.append("")
    lines.append("Your next action (choose number):")
    lines.append("Action:")
    return Prompt(text="\n".join(lines), step_index=t, history=tuple(history))


def replay(scenario: Scenario, history: Sequence[Action]) -> Environment:
    env = scenario.environment
    for a in history:
        env = step(env, a)
    return env


def render_prompt(scenario: Scenario, t: int, history: Sequence[Action]) -> Prompt:
    if len(history) != t:
        raise ValueError(f"history length {len(history)} != step index {t}")
    return render_prompt_state(replay(scenario, history), scenario.task, history, t)


# ---------------------------------------------------------------------------
# Feature encoding
# ---------------------------------------------------------------------------

def _descriptor_onehot(descriptor: Optional[tuple]) -> np.ndarray:
    out = np.zeros(len(KINDS) + len(COLORS), dtype=np.float32)
    if descriptor is not None:
        kind, color = descriptor
        out[KINDS.index(kind)] = 1.0
        out[len(KINDS) + COLORS.index(color)] = 1.0
    return out


def action_progress(env: Environment, task: Task) -> np.ndarray:
    """Per-action progress summary: a perception shortcut standing in for the
    pretrained spatial competence a large language backbone would bring.

    For each action: the remaining plan length after taking it, measured by a
    search restricted to mission-target interactions (allowing one relocation
    of a blocking object; normalized, capped); flags marking the actions that
    minimize it; and the gap between the estimate and an admissible lower
    bound, which grows on states where planning is intrinsically harder. Pure
    function of the observable state; the ground-truth plan is never consulted.
    """
    dists = np.empty(len(Action), dtype=np.float64)
    gaps = np.empty(len(Action), dtype=np.float64)
    for action in Action:
        nxt = step(env, action)
        reach = restricted_plan_length(nxt, task, max_depth=PROGRESS_CAP, side_moves=1)
        reach = PROGRESS_CAP if reach is None else min(reach + 1, PROGRESS_CAP)
        bound = min(completion_lower_bound(nxt, task) + 1, PROGRESS_CAP)
        dists[int(action)] = reach
        gaps[int(action)] = max(0, reach - bound)
    flags = (dists == dists.min()).astype(np.float32)
    return np.concatenate(
        [
            (dists / PROGRESS_CAP).astype(np.float32),
            flags,
            (gaps / PROGRESS_CAP).astype(np.float32),
        ]
    )


def encode_state(env: Environment, task: Task, history: Sequence[Action], t: int) -> np.ndarray:
    """Fixed-size binary encoding; every entry lies in [0, 1]."""
    grid = np.zeros((WINDOW_SIDE, WINDOW_SIDE, CELL_CHANNELS), dtype=np.float32)
    for y in range(env.height):
        for x in range(env.width):
            if (x, y) == env.agent_pos:
                continue
            content = env.cell(x, y)
            if content is None:
                continue
            fwd, lat = _egocentric(env, x, y)
            row, col = WINDOW_RADIUS - fwd, WINDOW_RADIUS + lat
            if content == "wall":
                grid[row, col, 0] = 1.0
            else:
                grid[row, col, 1 + KINDS.index(content.kind)] = 1.0
                grid[row, col, 1 + len(KINDS) + COLORS.index(content.color)] = 1.0

    carry = np.zeros(len(KINDS) + len(COLORS) + 1, dtype=np.float32)
    if env.carrying is not None:
        carry[KINDS.index(env.carrying.kind)] = 1.0
        carry[len(KINDS) + COLORS.index(env.carrying.color)] = 1.0
        carry[-1] = 1.0

    family = np.zeros(4, dtype=np.float32)
    family[_FAMILY_INDEX[task.family]] = 1.0

    hist = np.zeros((HISTORY_WINDOW, len(Action)), dtype=np.float32)
    recent = list(history)[-HISTORY_WINDOW:]
    for slot, a in enumerate(reversed(recent)):  # slot 0 = most recent
        hist[slot, int(a)] = 1.0

    step_frac = np.array([min(t, H_MAX) / H_MAX], dtype=np.float32)

    return np.concatenate(
        [
            grid.ravel(),
            carry,
            family,
            _descriptor_onehot(task.target_a),
            _descriptor_onehot(task.target_b),
            hist.ravel(),
            step_frac,
            action_progress(env, task),
        ]
    )


def encode_features(scenario: Scenario, t: int, history: Sequence[Action]) -> np.ndarray:
    if len(history) != t:
        raise ValueError(f"history length {len(history)} != step index {t}")
    return encode_state(replay(scenario, history), scenario.task, history, t)


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

def scenario_seed_stream(base_seed: int, n: int) -> list[int]:
    """Deterministic, collision-resistant per-scenario seeds."""
    return [
        int(np.random.SeedSequence([int(base_seed), i]).generate_state(1, np.uint64)[0])
        for i in range(n)
    ]


def teacher_forced_records(scenario: Scenario, plan: Sequence[Action]) -> list[StepRecord]:
    """Step records along the ground-truth plan; the prompt at step t reflects
    having executed the first t plan actions."""
    records = []
    env = scenario.environment
    history: list[Action] = []
    for t, correct in enumerate(plan):
        prompt = render_prompt_state(env, scenario.task, history, t)
        features = encode_state(env, scenario.task, history, t)
        records.append(
            StepRecord(
                scenario_id=scenario.scenario_id,
                t=t,
                prompt=prompt,
                features=features,
                correct_action=Action(correct),
            )
        )
        env = step(env, correct)
        history.append(Action(correct))
    return records


def build_dataset(n_scenarios: int, distribution_tag: str, rng_seed: int) -> list[DatasetEntry]:
    if n_scenarios <= 0:
        raise ValueError("n_scenarios must be positive")
    entries = []
    for i, seed in enumerate(scenario_seed_stream(rng_seed, n_scenarios)):
        scenario_id = f"{distribution_tag}-{rng_seed}-{i:05d}"
        scenario, plan = sample_scenario_with_plan(seed, distribution_tag, scenario_id=scenario_id)
        entries.append(
            DatasetEntry(scenario=scenario, plan=plan, records=teacher_forced_records(scenario, plan))
        )
    return entries


# ---------------------------------------------------------------------------
# Dataset files (JSON lines; scenario manifest + step records)
# ---------------------------------------------------------------------------

def write_dataset(entries: Sequence[DatasetEntry], out_dir, prefix: str) -> dict:
    """Writes <prefix>_manifest.jsonl and <prefix>_steps.jsonl; returns file info."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / f"{prefix}_manifest.jsonl"
    steps_path = out_dir / f"{prefix}_steps.jsonl"
    with open(manifest_path, "w") as mf:
        for e in entries:
            d = scenario_to_dict(e.scenario)
            d["plan"] = [int(a) for a in e.plan]
            mf.write(json.dumps(d, sort_keys=True) + "\n")
    with open(steps_path, "w") as sf:
        for e in entries:
            for r in e.records:
                sf.write(
                    json.dumps(
                        {
                            "v": 1,
                            "scenario_id": r.scenario_id,
                            "t": r.t,
                            "prompt_text": r.prompt.text,
                            "correct_action": int(r.correct_action),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    return {
        "manifest": str(manifest_path),
        "steps": str(steps_path),
        "n_scenarios": len(entries),
        "n_steps": sum(len(e.records) for e in entries),
    }


def load_dataset(out_dir, prefix: str) -> list[DatasetEntry]:
    """Rebuilds entries from the manifest; features and prompts are recomputed
    (the encoding is deterministic, so stored prompt text is redundant)."""
    manifest_path = Path(out_dir) / f"{prefix}_manifest.jsonl"
    entries = []
    with open(manifest_path) as mf:
        for line in mf:
            d = json.loads(line)
            scenario = scenario_from_dict(d)
            plan = [Action(a) for a in d["plan"]]
            entries.append(
                DatasetEntry(
                    scenario=scenario,
                    plan=plan,
                    records=teacher_forced_records(scenario, plan),
                )
            )
    return entries
