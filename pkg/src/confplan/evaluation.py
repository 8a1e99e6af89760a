"""Closed-loop rollouts with help requests, evaluation metrics, and sweep drivers.

A rollout re-renders the prompt and features from the actually-executed
trajectory at every step. Singleton prediction sets are executed directly;
non-singleton sets trigger a help request; empty sets (or a helper that cannot
find the correct action inside the set) halt the mission. The oracle helper
answers with the correct next action for the *current* state, replanning if the
executed trajectory has diverged from the original ground-truth plan.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import conformal, policy
from .encoding import encode_state, render_prompt_state
from .gridworld import (
    Action,
    PlannerError,
    Scenario,
    goal_satisfied,
    oracle_plan,
    plan_for,
    step,
)

OUTCOMES = ("success", "failure", "halted", "aborted")


@dataclass
class StepTrace:
    t: int
    prompt_text: str
    confidences: tuple
    set_actions: tuple  # action indices in the prediction set
    help_requested: bool
    executed: Optional[int]  # action index, None when the rollout stopped here
    source: Optional[str]    # "model" | "helper" | None


@dataclass
class RolloutTrace:
    scenario_id: str
    outcome: str
    steps_taken: int
    steps: list = field(default_factory=list)

    @property
    def n_help_requests(self) -> int:
        return sum(1 for s in self.steps if s.help_requested)


@dataclass
class MetricsReport:
    avg_set_size: float
    help_rate: float
    coverage_rate: float
    verification_rate: float
    n_scenarios: int
    n_steps: int
    alpha: float
    seeds: tuple
    delta: Optional[float] = None
    n_halted: int = 0

    def to_dict(self) -> dict:
        return {
            "v": 1,
            "avg_set_size": self.avg_set_size,
            "help_rate": self.help_rate,
            "coverage_rate": self.coverage_rate,
            "verification_rate": self.verification_rate,
            "n_scenarios": self.n_scenarios,
            "n_steps": self.n_steps,
            "alpha": self.alpha,
            "seeds": list(self.seeds),
            "delta": self.delta,
            "n_halted": self.n_halted,
        }


class PolicyScorer:
    """Adapts PolicyParams to the scorer interface used by rollouts."""

    def __init__(self, params: policy.PolicyParams):
        self.params = params

    def confidences(self, env, task, history, t, features) -> np.ndarray:
        return policy.forward(self.params, features)


def _as_scorer(model) -> object:
    if isinstance(model, policy.PolicyParams):
        return PolicyScorer(model)
    if hasattr(model, "confidences"):
        return model
    raise TypeError("model must be PolicyParams or expose .confidences(...)")


class OracleGuide:
    """Supplies the correct next action for the current state.

    Follows the original ground-truth plan while the executed prefix matches it
    and replans from the current environment after any divergence. Returns None
    when no plan exists from the current state.
    """

    def __init__(self, scenario: Scenario, plan: Optional[Sequence[Action]] = None):
        self.task = scenario.task
        self.plan = list(plan) if plan is not None else oracle_plan(scenario)
        self.base_len = 0

    def truth(self, env, history) -> Optional[Action]:
        k = len(history) - self.base_len
        if 0 <= k < len(self.plan) and list(history[self.base_len :]) == self.plan[:k]:
            return self.plan[k]
        try:
            new_plan = plan_for(env, self.task)
        except PlannerError:
            return None
        if not new_plan:
            return None
        self.plan = new_plan
        self.base_len = len(history)
        return new_plan[0]


class RolloutEngine:
    """Incremental closed-loop rollout with an explicit awaiting-help state.

    Used both for batch evaluation (oracle helper) and for interactive sessions
    where a human supplies the action via the service.
    """

    def __init__(
        self,
        model,
        threshold: conformal.Threshold,
        scenario: Scenario,
        max_steps: Optional[int] = None,
    ):
        if max_steps is None:
            max_steps = max(1, 2 * scenario.horizon)
        if max_steps < scenario.horizon:
            raise ValueError("max_steps must be at least the scenario horizon")
        self.scorer = _as_scorer(model)
        self.threshold = threshold
        self.scenario = scenario
        self.max_steps = max_steps
        self.env = scenario.environment
        self.history: list = []
        self.t = 0
        self.status = "running"  # running | awaiting_help | finished
        self.pending: Optional[dict] = None
        self.trace = RolloutTrace(scenario_id=scenario.scenario_id, outcome="failure", steps_taken=0)

    def _finish(self, outcome: str):
        self.trace.outcome = outcome
        self.trace.steps_taken = self.t
        self.status = "finished"
        self.pending = None

    def _record(self, prompt_text, probs, pset, help_requested, executed, source):
        self.trace.steps.append(
            StepTrace(
                t=self.t,
                prompt_text=prompt_text,
                confidences=tuple(float(v) for v in probs),
                set_actions=tuple(int(a) for a in pset.actions),
                help_requested=help_requested,
                executed=None if executed is None else int(executed),
                source=source,
            )
        )

    def _execute(self, action: Action, source: str, prompt_text, probs, pset, help_requested):
        self._record(prompt_text, probs, pset, help_requested, action, source)
        self.env = step(self.env, action)
        self.history.append(Action(action))
        self.t += 1
        if goal_satisfied(self.env, self.scenario.task):
            self._finish("success")

    def advance(self) -> str:
        """Runs model-decided steps until help is needed or the rollout ends."""
        while self.status == "running":
            if self.t >= self.max_steps:
                self._finish("failure")
                break
            task = self.scenario.task
            prompt_text = render_prompt_state(self.env, task, self.history, self.t).text
            features = encode_state(self.env, task, self.history, self.t)
            probs = self.scorer.confidences(self.env, task, self.history, self.t, features)
            pset = conformal.prediction_set(probs, self.threshold, self.t)
            help_requested = len(pset) != 1
            if len(pset) == 0:
                self._record(prompt_text, probs, pset, help_requested, None, None)
                self._finish("halted")
                break
            if len(pset) == 1:
                self._execute(pset.actions[0], "model", prompt_text, probs, pset, help_requested)
                continue
            self.pending = {
                "step": self.t,
                "prompt_text": prompt_text,
                "confidences": [float(v) for v in probs],
                "prediction_set": [int(a) for a in pset.actions],
                "pset": pset,
                "probs": probs,
            }
            self.status = "awaiting_help"
        return self.status

    def provide_help(self, action_index: int) -> None:
        """Executes a helper-chosen action; it must belong to the pending set."""
        if self.status != "awaiting_help" or self.pending is None:
            raise RuntimeError("no pending help request")
        if int(action_index) not in self.pending["prediction_set"]:
            raise ValueError(f"action {action_index} is outside the prediction set")
        pend = self.pending
        self.pending = None
        self.status = "running"
        self._execute(
            Action(int(action_index)),
            "helper",
            pend["prompt_text"],
            pend["probs"],
            pend["pset"],
            True,
        )

    def halt(self) -> None:
        """Helper cannot answer inside the set: record the step and stop."""
        if self.status != "awaiting_help" or self.pending is None:
            raise RuntimeError("no pending help request")
        pend = self.pending
        self._record(pend["prompt_text"], pend["probs"], pend["pset"], True, None, None)
        self._finish("halted")

    def abort(self) -> None:
        """Session-level abort (client abort or timeout): distinct outcome."""
        if self.status == "finished":
            return
        if self.pending is not None:
            pend = self.pending
            self._record(pend["prompt_text"], pend["probs"], pend["pset"], True, None, None)
        self._finish("aborted")


def rollout(
    model,
    threshold: conformal.Threshold,
    scenario: Scenario,
    help_source: Union[str, Callable] = "oracle",
    max_steps: Optional[int] = None,
    plan: Optional[Sequence[Action]] = None,
) -> RolloutTrace:
    """Runs one closed-loop mission.

    help_source is either "oracle" (ground-truth helper that halts when the
    correct action is outside the set) or a callable mapping the pending help
    request dict to an action index (None aborts). A TimeoutError from the
    callable aborts the rollout with outcome "aborted".
    """
    engine = RolloutEngine(model, threshold, scenario, max_steps=max_steps)
    guide = OracleGuide(scenario, plan=plan) if help_source == "oracle" else None
    while engine.advance() == "awaiting_help":
        if guide is not None:
            truth = guide.truth(engine.env, engine.history)
            if truth is not None and int(truth) in engine.pending["prediction_set"]:
                engine.provide_help(int(truth))
            else:
                engine.halt()
        else:
            try:
                choice = help_source(dict(engine.pending))
            except TimeoutError:
                engine.abort()
                break
            if choice is None:
                engine.abort()
                break
            engine.provide_help(int(choice))
    return engine.trace


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def metrics_from_traces(
    traces: Sequence[RolloutTrace],
    alpha: float,
    seeds: Sequence[int] = (0,),
    delta: Optional[float] = None,
) -> MetricsReport:
    n_steps = sum(len(tr.steps) for tr in traces)
    set_sizes = [len(s.set_actions) for tr in traces for s in tr.steps]
    n_help = sum(1 for tr in traces for s in tr.steps if len(s.set_actions) > 1)
    n_success = sum(1 for tr in traces if tr.outcome == "success")
    n_verified = sum(1 for tr in traces if tr.outcome == "success" and tr.n_help_requests == 0)
    n_halted = sum(1 for tr in traces if tr.outcome == "halted")
    return MetricsReport(
        avg_set_size=float(np.mean(set_sizes)) if set_sizes else 0.0,
        help_rate=n_help / n_steps if n_steps else 0.0,
        coverage_rate=n_success / len(traces) if traces else 0.0,
        verification_rate=n_verified / len(traces) if traces else 0.0,
        n_scenarios=len(traces),
        n_steps=n_steps,
        alpha=alpha,
        seeds=tuple(seeds),
        delta=delta,
        n_halted=n_halted,
    )


def evaluate(
    model,
    threshold: conformal.Threshold,
    scenarios: Sequence[Scenario],
    seeds: Sequence[int] = (0,),
    plans: Optional[Sequence[Sequence[Action]]] = None,
    return_traces: bool = False,
):
    """Oracle-help rollouts over the given scenarios, reduced to the four metrics.

    seeds is provenance metadata recorded in the report (rollouts themselves
    are deterministic given model, threshold, and scenarios).
    """
    if not scenarios:
        raise ValueError("scenarios must be non-empty")
    traces = []
    for i, scenario in enumerate(scenarios):
        plan = plans[i] if plans is not None else None
        traces.append(rollout(model, threshold, scenario, help_source="oracle", plan=plan))
    report = metrics_from_traces(traces, alpha=threshold.alpha, seeds=seeds, delta=threshold.delta)
    return (report, traces) if return_traces else report


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Average metric values across independent runs (e.g. training seeds)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    seeds = tuple(s for r in reports for s in r.seeds)
    return MetricsReport(
        avg_set_size=float(np.mean([r.avg_set_size for r in reports])),
        help_rate=float(np.mean([r.help_rate for r in reports])),
        coverage_rate=float(np.mean([r.coverage_rate for r in reports])),
        verification_rate=float(np.mean([r.verification_rate for r in reports])),
        n_scenarios=sum(r.n_scenarios for r in reports),
        n_steps=sum(r.n_steps for r in reports),
        alpha=reports[0].alpha,
        seeds=seeds,
        delta=float(np.mean([r.delta for r in reports])) if all(r.delta is not None for r in reports) else None,
        n_halted=sum(r.n_halted for r in reports),
    )


def alpha_sweep(
    model,
    calib_entries,
    alphas: Sequence[float],
    scenarios: Sequence[Scenario],
    seeds: Sequence[int] = (0,),
) -> list:
    """Recalibrates the threshold per alpha and evaluates a fixed model."""
    reports = []
    for alpha in alphas:
        threshold = conformal.calibrate(_params_of(model), calib_entries, alpha)
        reports.append(evaluate(model, threshold, scenarios, seeds=seeds))
    return reports


def _params_of(model):
    if isinstance(model, policy.PolicyParams):
        return model
    if isinstance(model, PolicyScorer):
        return model.params
    raise TypeError("calibration requires a parameterized policy")


def ood_evaluate(
    model,
    calib_entries,
    ood_scenarios: Sequence[Scenario],
    alpha: float,
    seeds: Sequence[int] = (0,),
):
    """Calibrate on the main distribution, evaluate under the shifted one.

    Coverage is reported but carries no guarantee here: the shifted scenarios
    are not exchangeable with the calibration data.
    """
    threshold = conformal.calibrate(_params_of(model), calib_entries, alpha)
    return evaluate(model, threshold, ood_scenarios, seeds=seeds)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def markdown_table(rows: Sequence[tuple]) -> str:
    """Rows of (label, MetricsReport) to a comparison table."""
    lines = [
        "| Method | Set Size | Help Rate | Coverage | Verification Rate |",
        "|---|---|---|---|---|",
    ]
    for label, r in rows:
        lines.append(
            f"| {label} | {r.avg_set_size:.3f} | {100 * r.help_rate:.1f}% "
            f"| {100 * r.coverage_rate:.1f}% | {100 * r.verification_rate:.1f}% |"
        )
    return "\n".join(lines)


def write_report(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def write_traces(traces: Sequence[RolloutTrace], path) -> None:
    with open(path, "w") as f:
        for tr in traces:
            f.write(
                json.dumps(
                    {
                        "v": 1,
                        "scenario_id": tr.scenario_id,
                        "outcome": tr.outcome,
                        "steps_taken": tr.steps_taken,
                        "steps": [
                            {
                                "t": s.t,
                                "prompt_text": s.prompt_text,
                                "confidences": list(s.confidences),
                                "prediction_set": list(s.set_actions),
                                "help_requested": s.help_requested,
                                "executed": s.executed,
                                "source": s.source,
                            }
                            for s in tr.steps
                        ],
                    }
                )
                + "\n"
            )
