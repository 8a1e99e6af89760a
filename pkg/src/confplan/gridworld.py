"""Procedural grid-world environments with deterministic dynamics and a BFS oracle planner.

Environments are square-ish grids whose boundary ring is solid wall; the interior
holds the agent plus a handful of colored objects. Missions come in four families
of increasing difficulty (GoTo, PickUp, PickUpThenGoTo, PutNext). A breadth-first
planner over full environment state supplies the unique shortest ground-truth plan
for each sampled scenario (ties broken by lowest action index).
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Optional

# Shared object vocabulary. The main distribution "D" uses the first four kinds,
# the shifted distribution "D_prime" the last three; feature encodings must cover
# both so a policy trained on D can be evaluated under D_prime.
KINDS_MAIN = ("key", "ball", "box", "door")
KINDS_SHIFTED = ("cone", "hydrant", "car")
KINDS = KINDS_MAIN + KINDS_SHIFTED
COLORS = ("red", "green", "blue", "yellow", "grey", "purple")

FAMILIES = ("GoTo", "PickUp", "PickUpThenGoTo", "PutNext")

DIST_MAIN = "D"
DIST_SHIFTED = "D_prime"
DISTRIBUTION_TAGS = (DIST_MAIN, DIST_SHIFTED)

# Scenarios whose shortest plan is empty or longer than H_MAX are resampled.
H_MAX = 40

# Safety valves for the generator and the planner.
MAX_SCENARIO_ATTEMPTS = 100
BFS_NODE_CAP = 2_000_000


class GeneratorError(RuntimeError):
    """Scenario sampling could not produce a valid scenario."""


class PlannerError(RuntimeError):
    """No plan exists (or the search exceeded its caps)."""


class Action(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    GO_FORWARD = 2
    PICK_UP = 3
    DROP = 4
    TOGGLE = 5


# Names must match the prompt menu exactly.
ACTION_NAMES = (
    "turn left",
    "turn right",
    "go forward",
    "pick up object",
    "drop object",
    "toggle",
)


class Direction(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


DIRECTION_NAMES = ("north", "east", "south", "west")

# (dx, dy) per direction; y grows southward.
DIR_VECS = {
    Direction.NORTH: (0, -1),
    Direction.EAST: (1, 0),
    Direction.SOUTH: (0, 1),
    Direction.WEST: (-1, 0),
}


@dataclass(frozen=True)
class Obj:
    kind: str
    color: str
    is_open: bool = False  # meaningful for doors only

    def matches(self, descriptor: tuple[str, str]) -> bool:
        return (self.kind, self.color) == tuple(descriptor)


@dataclass
class Environment:
    """Grid state: boundary walls, placed objects, agent pose, carried object.

    Cells are addressed as (x, y) with x in [0, width) growing east and
    y in [0, height) growing south. The boundary ring is wall; walls never
    occur in the interior.
    """

    width: int
    height: int
    objects: dict[tuple[int, int], Obj]
    agent_pos: tuple[int, int]
    agent_dir: Direction
    carrying: Optional[Obj] = None

    def is_wall(self, x: int, y: int) -> bool:
        return x <= 0 or y <= 0 or x >= self.width - 1 or y >= self.height - 1

    def in_interior(self, x: int, y: int) -> bool:
        return 0 < x < self.width - 1 and 0 < y < self.height - 1

    def cell(self, x: int, y: int):
        """Returns "wall", an Obj, or None for an empty cell."""
        if self.is_wall(x, y):
            return "wall"
        return self.objects.get((x, y))

    def front_pos(self) -> tuple[int, int]:
        dx, dy = DIR_VECS[self.agent_dir]
        return (self.agent_pos[0] + dx, self.agent_pos[1] + dy)

    def copy(self) -> "Environment":
        return Environment(
            width=self.width,
            height=self.height,
            objects=dict(self.objects),
            agent_pos=self.agent_pos,
            agent_dir=self.agent_dir,
            carrying=self.carrying,
        )


@dataclass
class Task:
    family: str
    target_a: tuple[str, str]
    target_b: Optional[tuple[str, str]] = None
    mission_text: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family: {self.family!r}")
        two_target = self.family in ("PickUpThenGoTo", "PutNext")
        if two_target != (self.target_b is not None):
            raise ValueError(f"{self.family} requires target_b iff two-target family")
        self.target_a = tuple(self.target_a)
        if self.target_b is not None:
            self.target_b = tuple(self.target_b)
        if not self.mission_text:
            self.mission_text = mission_text(self.family, self.target_a, self.target_b)


def mission_text(family: str, a: tuple[str, str], b: Optional[tuple[str, str]]) -> str:
    if family == "GoTo":
        return f"go to the {a[1]} {a[0]}"
    if family == "PickUp":
        return f"pick up the {a[1]} {a[0]}"
    if family == "PickUpThenGoTo":
        return f"go to a {b[1]} {b[0]} after you pick up the {a[1]} {a[0]}"
    if family == "PutNext":
        return f"put the {a[1]} {a[0]} next to the {b[1]} {b[0]}"
    raise ValueError(f"unknown task family: {family!r}")


@dataclass
class Scenario:
    environment: Environment
    task: Task
    horizon: int
    seed: int
    distribution_tag: str
    scenario_id: str = ""

    def __post_init__(self):
        if not self.scenario_id:
            self.scenario_id = f"{self.distribution_tag}:{self.seed}"


Plan = list  # list[Action]


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def step(env: Environment, action: Action) -> Environment:
    """One deterministic transition. Invalid moves are no-ops that still consume the step."""
    out = env.copy()
    action = Action(action)
    if action == Action.TURN_LEFT:
        out.agent_dir = Direction((env.agent_dir - 1) % 4)
    elif action == Action.TURN_RIGHT:
        out.agent_dir = Direction((env.agent_dir + 1) % 4)
    elif action == Action.GO_FORWARD:
        fx, fy = env.front_pos()
        if not env.is_wall(fx, fy) and (fx, fy) not in env.objects:
            out.agent_pos = (fx, fy)
    elif action == Action.PICK_UP:
        front = env.front_pos()
        obj = env.objects.get(front)
        if obj is not None and env.carrying is None:
            del out.objects[front]
            out.carrying = obj
    elif action == Action.DROP:
        fx, fy = env.front_pos()
        if env.carrying is not None and not env.is_wall(fx, fy) and (fx, fy) not in env.objects:
            out.objects[(fx, fy)] = env.carrying
            out.carrying = None
    elif action == Action.TOGGLE:
        front = env.front_pos()
        obj = env.objects.get(front)
        if obj is not None and obj.kind == "door":
            out.objects[front] = replace(obj, is_open=not obj.is_open)
    return out


def goal_satisfied(env: Environment, task: Task) -> bool:
    front_obj = env.objects.get(env.front_pos())
    if task.family == "GoTo":
        return front_obj is not None and front_obj.matches(task.target_a)
    if task.family == "PickUp":
        return env.carrying is not None and env.carrying.matches(task.target_a)
    if task.family == "PickUpThenGoTo":
        return (
            env.carrying is not None
            and env.carrying.matches(task.target_a)
            and front_obj is not None
            and front_obj.matches(task.target_b)
        )
    if task.family == "PutNext":
        if env.carrying is not None and env.carrying.matches(task.target_a):
            return False
        a_cells = [p for p, o in env.objects.items() if o.matches(task.target_a)]
        b_cells = {p for p, o in env.objects.items() if o.matches(task.target_b)}
        for (ax, ay) in a_cells:
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                if (ax + dx, ay + dy) in b_cells:
                    return True
        return False
    raise ValueError(f"unknown task family: {task.family!r}")


# ---------------------------------------------------------------------------
# Oracle planner
# ---------------------------------------------------------------------------

def oracle_plan(scenario: Scenario) -> list[Action]:
    """Shortest action sequence reaching the goal; raises PlannerError if none exists."""
    return plan_for(scenario.environment, scenario.task, max_depth=H_MAX)


def plan_for(env: Environment, task: Task, max_depth: int = H_MAX) -> list[Action]:
    """BFS over (agent pose, carried object, object placements, door states).

    Expanding actions in index order with first-visit-wins makes the returned
    plan the lexicographically smallest among all shortest plans, so the
    ground-truth plan is unique. States whose depth plus an admissible
    completion lower bound exceeds the current depth budget are pruned, and the
    budget grows until a plan appears; the pruning removes only states no
    within-budget plan can pass through, so the result is identical to an
    unbounded breadth-first search.
    """
    ctx = _compile_mission(env, task)
    if ctx.goal(ctx.start[0], ctx.start[1], ctx.start[2], ctx.start[3]):
        return []

    # A valid plan from a search restricted to mission-relevant interactions
    # upper-bounds the optimum, so one pruned exact pass suffices; fall back to
    # growing the budget when the restricted search finds nothing (e.g. a
    # blocking object must be moved).
    upper = _restricted_search_length(ctx, max_depth)
    if upper is not None:
        result, _ = _bounded_lex_bfs(ctx, upper)
        if result is None:
            raise PlannerError("bounded search failed below a known upper bound")
        return result

    bound = max(1, ctx.lower_bound(ctx.start[0], ctx.start[2], ctx.start[3]))
    while bound <= max_depth:
        result, exhausted = _bounded_lex_bfs(ctx, bound)
        if result is not None:
            return result
        if exhausted:
            break
        bound += 1
    raise PlannerError("no plan within depth bound")


def restricted_plan_length(env: Environment, task: Task, max_depth: int = H_MAX + 8, side_moves: int = 0):
    """Length of a shortest plan that only manipulates mission-target objects,
    plus at most side_moves relocations of other (e.g. blocking) objects.

    An upper bound on the true optimum, and empirically equal to it for
    side_moves=1 on the supported distributions; None when no such plan exists
    within max_depth. Zero when the goal already holds.
    """
    ctx = _compile_mission(env, task)
    if ctx.goal(ctx.start[0], ctx.start[1], ctx.start[2], ctx.start[3]):
        return 0
    if side_moves <= 0:
        return _restricted_search_length(ctx, max_depth)
    return _restricted_search_length_budget(ctx, max_depth, side_moves)


def _restricted_search_length_budget(ctx: _MissionContext, max_depth: int, budget: int):
    """Restricted search that may additionally pick up non-target objects a
    bounded number of times (enough to clear blocking objects)."""
    width, n_obj = ctx.width, ctx.n_obj
    dirvec, is_wall, goal = ctx.dirvec, ctx.is_wall, ctx.goal
    relevant = ctx.a_set | ctx.b_set
    start = ctx.start + (0,)
    visited = {start}
    frontier = deque([(start, 0)])
    while frontier:
        state, depth = frontier.popleft()
        if depth >= max_depth or len(visited) > BFS_NODE_CAP:
            continue
        pos_i, d, carry, placements, dmask, used = state
        x, y = unidx_xy(pos_i, width)
        dx, dy = dirvec[d]
        fx, fy = x + dx, y + dy
        fi = fy * width + fx
        front_obj = -1
        for i in range(n_obj):
            if placements[i] == fi:
                front_obj = i
                break
        front_free = (not is_wall(fx, fy)) and front_obj == -1

        candidates = [
            (pos_i, (d - 1) % 4, carry, placements, dmask, used),
            (pos_i, (d + 1) % 4, carry, placements, dmask, used),
        ]
        if front_free:
            candidates.append((fi, d, carry, placements, dmask, used))
        if carry == -1 and front_obj >= 0:
            if front_obj in relevant:
                pl = list(placements)
                pl[front_obj] = -1
                candidates.append((pos_i, d, front_obj, tuple(pl), dmask, used))
            elif used < budget:
                pl = list(placements)
                pl[front_obj] = -1
                candidates.append((pos_i, d, front_obj, tuple(pl), dmask, used + 1))
        if carry != -1 and front_free:
            pl = list(placements)
            pl[carry] = fi
            candidates.append((pos_i, d, -1, tuple(pl), dmask, used))

        for nxt in candidates:
            if nxt in visited:
                continue
            visited.add(nxt)
            if goal(nxt[0], nxt[1], nxt[2], nxt[3]):
                return depth + 1
            frontier.append((nxt, depth + 1))
    return None


def completion_lower_bound(env: Environment, task: Task) -> int:
    """Admissible lower bound on the remaining plan length (0 when done)."""
    ctx = _compile_mission(env, task)
    if ctx.goal(ctx.start[0], ctx.start[1], ctx.start[2], ctx.start[3]):
        return 0
    return ctx.lower_bound(ctx.start[0], ctx.start[2], ctx.start[3])


class _MissionContext:
    """Compact search representation shared by the planner entry points."""

    __slots__ = (
        "width", "n_obj", "family", "a_set", "b_set", "door_bit",
        "dirvec", "is_wall", "start", "goal", "lower_bound",
    )


def _compile_mission(env: Environment, task: Task) -> _MissionContext:
    width = env.width
    items = sorted(env.objects.items())  # stable object identity by initial cell
    kinds = [o.kind for _, o in items]
    colors = [o.color for _, o in items]
    doors = [i for i, k in enumerate(kinds) if k == "door"]
    door_bit = {i: 1 << n for n, i in enumerate(doors)}

    def idx(pos):
        return pos[1] * width + pos[0]

    def unidx(i):
        return (i % width, i // width)

    a_set = frozenset(
        i for i in range(len(items)) if (kinds[i], colors[i]) == task.target_a
    )
    b_set = (
        frozenset(i for i in range(len(items)) if (kinds[i], colors[i]) == task.target_b)
        if task.target_b is not None
        else frozenset()
    )

    carried0 = -1
    placements0 = [idx(pos) for pos, _ in items]
    if env.carrying is not None:
        # Carried objects have no cell; track them with a sentinel slot appended last.
        items_c = items + [((-1, -1), env.carrying)]
        kinds.append(env.carrying.kind)
        colors.append(env.carrying.color)
        if env.carrying.kind == "door":
            door_bit[len(items)] = 1 << len(door_bit)
            doors.append(len(items))
        if (env.carrying.kind, env.carrying.color) == task.target_a:
            a_set = a_set | {len(items)}
        if task.target_b is not None and (env.carrying.kind, env.carrying.color) == task.target_b:
            b_set = b_set | {len(items)}
        placements0.append(-1)
        carried0 = len(items)
        items = items_c

    n_obj = len(items)
    door_mask0 = 0
    for i in doors:
        if items[i][1].is_open:
            door_mask0 |= door_bit[i]

    dirvec = [DIR_VECS[Direction(d)] for d in range(4)]
    is_wall = env.is_wall
    family = task.family
    adj = ((1, 0), (-1, 0), (0, 1), (0, -1))

    def goal(pos_i, d, carry, placements):
        if family == "PickUp":
            return carry in a_set
        x, y = unidx(pos_i)
        dx, dy = dirvec[d]
        fi = (y + dy) * width + (x + dx)
        if family == "GoTo":
            for i in a_set:
                if placements[i] == fi:
                    return True
            return False
        if family == "PickUpThenGoTo":
            if carry not in a_set:
                return False
            for i in b_set:
                if placements[i] == fi:
                    return True
            return False
        # PutNext
        if carry in a_set:
            return False
        b_cells = {placements[i] for i in b_set if placements[i] >= 0}
        if not b_cells:
            return False
        for i in a_set:
            pi = placements[i]
            if pi < 0:
                continue
            px, py = unidx(pi)
            for dx2, dy2 in adj:
                if (py + dy2) * width + (px + dx2) in b_cells:
                    return True
        return False

    def manhattan(i, j):
        return abs(i % width - j % width) + abs(i // width - j // width)

    BIG = 4 * width * width

    def lower_bound(pos_i, carry, placements):
        """Admissible completion bound: a min over route cases, each a proven
        lower bound for plans of that shape, so it never exceeds the true
        remaining step count (even for plans that relocate objects)."""
        if family == "PickUp":
            if carry in a_set:
                return 0
            return min(
                (manhattan(pos_i, placements[i]) for i in a_set if placements[i] >= 0),
                default=0,
            )
        if family == "GoTo":
            best = 1 if carry in a_set else BIG
            for i in a_set:
                if placements[i] >= 0:
                    d_ = manhattan(pos_i, placements[i]) - 1
                    if d_ < best:
                        best = d_
            return max(0, min(best, BIG - 1)) if best < BIG else 0

        # Two-object families. Route bounds:
        #   * placed u (pickup target) with placed v (reference target): the
        #     plan must reach u's current cell (its first pickup happens there)
        #     and relate it to v's current cell, giving
        #     min(d(agent,u), d(agent,v)) + d(u,v) - 2;
        #   * routes involving the carried object fall back to coarser floors.
        placed_a = [placements[i] for i in a_set if placements[i] >= 0]
        placed_b = [placements[j] for j in b_set if placements[j] >= 0]
        pair_best = BIG
        for i in a_set:
            pi = placements[i]
            if pi < 0:
                continue
            for j in b_set:
                pj = placements[j]
                if j == i or pj < 0:
                    continue
                d_ = min(manhattan(pos_i, pi), manhattan(pos_i, pj)) + manhattan(pi, pj) - 2
                if d_ < pair_best:
                    pair_best = d_

        best = pair_best
        if family == "PickUpThenGoTo":
            if carry in a_set:
                carried_route = min(
                    (manhattan(pos_i, pj) - 1 for pj in placed_b), default=1
                )
                best = min(best, carried_route)
            elif carry in b_set and placed_a:
                # The carried object may serve as the reference target after a
                # drop; the pickup target must still be fetched.
                best = min(best, min(manhattan(pos_i, pi) for pi in placed_a))
        else:  # PutNext
            if carry in a_set:
                carried_route = min(
                    (manhattan(pos_i, pj) - 1 for pj in placed_b), default=0
                )
                best = min(best, carried_route)
                # A placed pair may already be adjacent; dropping the carried
                # match is then the only remaining obligation.
                for i in a_set:
                    pi = placements[i]
                    if pi < 0:
                        continue
                    for j in b_set:
                        pj = placements[j]
                        if j != i and pj >= 0 and manhattan(pi, pj) == 1:
                            best = min(best, 1)
            elif carry in b_set and placed_a:
                best = min(best, min(manhattan(pos_i, pi) for pi in placed_a) - 1)
        if best >= BIG:
            return 0
        return max(0, best)

    ctx = _MissionContext()
    ctx.width = width
    ctx.n_obj = n_obj
    ctx.family = family
    ctx.a_set = a_set
    ctx.b_set = b_set
    ctx.door_bit = door_bit
    ctx.dirvec = dirvec
    ctx.is_wall = is_wall
    ctx.start = (idx(env.agent_pos), int(env.agent_dir), carried0, tuple(placements0), door_mask0)
    ctx.goal = goal
    ctx.lower_bound = lower_bound
    return ctx


def _restricted_search_length(ctx: _MissionContext, max_depth: int):
    """Shortest plan length touching only mission-target objects (pick up either
    target kind, drop anywhere free); None if none exists within max_depth."""
    width, n_obj = ctx.width, ctx.n_obj
    dirvec, is_wall, goal = ctx.dirvec, ctx.is_wall, ctx.goal
    relevant = ctx.a_set | ctx.b_set
    start = ctx.start
    visited = {start}
    frontier = deque([(start, 0)])
    while frontier:
        state, depth = frontier.popleft()
        if depth >= max_depth or len(visited) > BFS_NODE_CAP:
            continue
        pos_i, d, carry, placements, dmask = state
        x, y = unidx_xy(pos_i, width)
        dx, dy = dirvec[d]
        fx, fy = x + dx, y + dy
        fi = fy * width + fx
        front_obj = -1
        for i in range(n_obj):
            if placements[i] == fi:
                front_obj = i
                break
        front_free = (not is_wall(fx, fy)) and front_obj == -1

        candidates = [
            (pos_i, (d - 1) % 4, carry, placements, dmask),
            (pos_i, (d + 1) % 4, carry, placements, dmask),
        ]
        if front_free:
            candidates.append((fi, d, carry, placements, dmask))
        if carry == -1 and front_obj in relevant:
            pl = list(placements)
            pl[front_obj] = -1
            candidates.append((pos_i, d, front_obj, tuple(pl), dmask))
        if carry != -1 and front_free:
            pl = list(placements)
            pl[carry] = fi
            candidates.append((pos_i, d, -1, tuple(pl), dmask))

        for nxt in candidates:
            if nxt in visited:
                continue
            visited.add(nxt)
            if goal(nxt[0], nxt[1], nxt[2], nxt[3]):
                return depth + 1
            frontier.append((nxt, depth + 1))
    return None


def _bounded_lex_bfs(ctx: _MissionContext, bound: int):
    """One BFS wave with depth+bound pruning; returns (plan | None, exhausted)."""
    width, n_obj = ctx.width, ctx.n_obj
    dirvec, is_wall, goal, h_fn = ctx.dirvec, ctx.is_wall, ctx.goal, ctx.lower_bound
    door_bit = ctx.door_bit
    start = ctx.start
    came_from: dict = {start: None}
    frontier = deque([(start, 0)])
    pruned_any = False
    while frontier:
        state, depth = frontier.popleft()
        if len(came_from) > BFS_NODE_CAP:
            raise PlannerError("state cap exceeded during planning")
        pos_i, d, carry, placements, dmask = state
        x, y = unidx_xy(pos_i, width)
        dx, dy = dirvec[d]
        fx, fy = x + dx, y + dy
        fi = fy * width + fx
        front_obj = -1
        for i in range(n_obj):
            if placements[i] == fi:
                front_obj = i
                break
        front_free = (not is_wall(fx, fy)) and front_obj == -1

        for action in range(6):
            if action == 0:
                nxt = (pos_i, (d - 1) % 4, carry, placements, dmask)
            elif action == 1:
                nxt = (pos_i, (d + 1) % 4, carry, placements, dmask)
            elif action == 2:
                if not front_free:
                    continue
                nxt = (fi, d, carry, placements, dmask)
            elif action == 3:
                if front_obj == -1 or carry != -1:
                    continue
                pl = list(placements)
                pl[front_obj] = -1
                nxt = (pos_i, d, front_obj, tuple(pl), dmask)
            elif action == 4:
                if carry == -1 or not front_free:
                    continue
                pl = list(placements)
                pl[carry] = fi
                nxt = (pos_i, d, -1, tuple(pl), dmask)
            else:
                if front_obj == -1 or front_obj not in door_bit:
                    continue
                nxt = (pos_i, d, carry, placements, dmask ^ door_bit[front_obj])
            if nxt in came_from:
                continue
            if depth + 1 + h_fn(nxt[0], nxt[2], nxt[3]) > bound:
                pruned_any = True
                continue
            came_from[nxt] = (state, Action(action))
            if goal(nxt[0], nxt[1], nxt[2], nxt[3]):
                actions: list[Action] = []
                cur = nxt
                while came_from[cur] is not None:
                    cur, act = came_from[cur]
                    actions.append(act)
                actions.reverse()
                return actions, False
            frontier.append((nxt, depth + 1))
    return None, not pruned_any


def unidx_xy(i, width):
    return (i % width, i // width)


# ---------------------------------------------------------------------------
# Scenario sampling
# ---------------------------------------------------------------------------

# (total width, total height, kind vocabulary, object count range) per distribution.
_DIST_SPECS = {
    DIST_MAIN: (8, 8, KINDS_MAIN, (4, 8)),
    DIST_SHIFTED: (5, 7, KINDS_SHIFTED, (3, 6)),
}


def sample_scenario(rng_seed: int, distribution_tag: str, scenario_id: str = "") -> Scenario:
    """Draws one solvable scenario; identical (seed, tag) inputs yield identical scenarios.

    Internally resamples until the oracle plan has length 1..H_MAX; raises
    GeneratorError after MAX_SCENARIO_ATTEMPTS rejected draws.
    """
    scenario, _ = sample_scenario_with_plan(rng_seed, distribution_tag, scenario_id)
    return scenario


def sample_scenario_with_plan(
    rng_seed: int, distribution_tag: str, scenario_id: str = ""
) -> tuple[Scenario, list]:
    """sample_scenario plus the oracle plan computed during validation."""
    if distribution_tag not in _DIST_SPECS:
        raise GeneratorError(f"unknown distribution tag: {distribution_tag!r}")
    width, height, kind_vocab, count_range = _DIST_SPECS[distribution_tag]
    interior = [(x, y) for x in range(1, width - 1) for y in range(1, height - 1)]

    for attempt in range(MAX_SCENARIO_ATTEMPTS):
        rng = random.Random(rng_seed * 100_003 + attempt)
        n_objects = rng.randint(*count_range)
        cells = rng.sample(interior, n_objects + 1)
        objects = {
            pos: Obj(kind=rng.choice(kind_vocab), color=rng.choice(COLORS))
            for pos in cells[:n_objects]
        }
        env = Environment(
            width=width,
            height=height,
            objects=objects,
            agent_pos=cells[n_objects],
            agent_dir=Direction(rng.randrange(4)),
        )

        family = rng.choice(FAMILIES)
        placed = sorted(objects.items())
        a_pos, a_obj = placed[rng.randrange(len(placed))]
        target_b = None
        if family in ("PickUpThenGoTo", "PutNext"):
            others = [(p, o) for p, o in placed if p != a_pos]
            if not others:
                continue
            _, b_obj = others[rng.randrange(len(others))]
            target_b = (b_obj.kind, b_obj.color)
        task = Task(family=family, target_a=(a_obj.kind, a_obj.color), target_b=target_b)

        scenario = Scenario(
            environment=env,
            task=task,
            horizon=0,
            seed=rng_seed,
            distribution_tag=distribution_tag,
            scenario_id=scenario_id,
        )
        try:
            plan = oracle_plan(scenario)
        except PlannerError:
            continue
        if not (1 <= len(plan) <= H_MAX):
            continue
        scenario.horizon = len(plan)
        return scenario, plan
    raise GeneratorError(
        f"no valid scenario after {MAX_SCENARIO_ATTEMPTS} attempts (seed={rng_seed}, tag={distribution_tag})"
    )


# ---------------------------------------------------------------------------
# Serialization (one JSON object per line; shared by all dataset files)
# ---------------------------------------------------------------------------

def environment_to_dict(env: Environment) -> dict:
    return {
        "width": env.width,
        "height": env.height,
        "objects": [
            {"x": x, "y": y, "kind": o.kind, "color": o.color, "is_open": o.is_open}
            for (x, y), o in sorted(env.objects.items())
        ],
        "agent_pos": list(env.agent_pos),
        "agent_dir": DIRECTION_NAMES[env.agent_dir],
        "carrying": (
            {"kind": env.carrying.kind, "color": env.carrying.color, "is_open": env.carrying.is_open}
            if env.carrying
            else None
        ),
    }


def environment_from_dict(d: dict) -> Environment:
    return Environment(
        width=d["width"],
        height=d["height"],
        objects={
            (o["x"], o["y"]): Obj(o["kind"], o["color"], o.get("is_open", False))
            for o in d["objects"]
        },
        agent_pos=tuple(d["agent_pos"]),
        agent_dir=Direction(DIRECTION_NAMES.index(d["agent_dir"])),
        carrying=(
            Obj(d["carrying"]["kind"], d["carrying"]["color"], d["carrying"].get("is_open", False))
            if d.get("carrying")
            else None
        ),
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    t = scenario.task
    return {
        "v": 1,
        "scenario_id": scenario.scenario_id,
        "seed": scenario.seed,
        "distribution_tag": scenario.distribution_tag,
        "horizon": scenario.horizon,
        "environment": environment_to_dict(scenario.environment),
        "task": {
            "family": t.family,
            "target_a": list(t.target_a),
            "target_b": list(t.target_b) if t.target_b else None,
            "mission_text": t.mission_text,
        },
    }


def scenario_from_dict(d: dict) -> Scenario:
    t = d["task"]
    return Scenario(
        environment=environment_from_dict(d["environment"]),
        task=Task(
            family=t["family"],
            target_a=tuple(t["target_a"]),
            target_b=tuple(t["target_b"]) if t.get("target_b") else None,
            mission_text=t.get("mission_text", ""),
        ),
        horizon=d["horizon"],
        seed=d["seed"],
        distribution_tag=d["distribution_tag"],
        scenario_id=d["scenario_id"],
    )


def scenario_to_json(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), sort_keys=True)
