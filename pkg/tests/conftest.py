import numpy as np
import pytest

from confplan import encoding, policy
from confplan.gridworld import (
    Action,
    Direction,
    Environment,
    Obj,
    Scenario,
    Task,
    goal_satisfied,
    step,
)


def make_env(width, height, objects, agent_pos, agent_dir, carrying=None):
    return Environment(
        width=width,
        height=height,
        objects={pos: obj for pos, obj in objects.items()},
        agent_pos=agent_pos,
        agent_dir=agent_dir,
        carrying=carrying,
    )


def exhaustive_shortest_plan(env, task, max_depth):
    """Lexicographic iterative-deepening search over raw action sequences.

    Independent of the BFS planner: it only uses the public step/goal API.
    Returns the first (lexicographically smallest) shortest plan found.
    """
    if goal_satisfied(env, task):
        return []
    for depth in range(1, max_depth + 1):
        found = _dfs(env, task, depth, [])
        if found is not None:
            return found
    return None


def _dfs(env, task, remaining, seq):
    if remaining == 0:
        return list(seq) if goal_satisfied(env, task) else None
    for a in Action:
        seq.append(a)
        found = _dfs(step(env, a), task, remaining - 1, seq)
        seq.pop()
        if found is not None:
            return found
    return None


class OracleMimicScorer:
    """Scorer that puts probability one on the ground-truth action."""

    def __init__(self, scenario, plan=None):
        from confplan.evaluation import OracleGuide

        self.guide = OracleGuide(scenario, plan=plan)

    def confidences(self, env, task, history, t, features):
        probs = np.zeros(6)
        truth = self.guide.truth(env, history)
        if truth is not None:
            probs[int(truth)] = 1.0
        return probs


@pytest.fixture(scope="session")
def small_dataset():
    return encoding.build_dataset(8, "D", rng_seed=101)


@pytest.fixture(scope="session")
def small_cal_dataset():
    return encoding.build_dataset(12, "D", rng_seed=202)


@pytest.fixture(scope="session")
def uniform_policy():
    return policy.zero_params(encoding.FEATURE_DIM, hidden=(8,))
