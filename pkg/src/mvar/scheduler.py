"""Greedy lead-time composition of single-step models into hourly forecasts."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

DEFAULT_LEADS = (24, 6, 3, 1)
HISTORY_HOURS = 24


class MissingCheckpointError(KeyError):
    def __init__(self, lead: int):
        super().__init__(f"no model for lead {lead}h")
        self.lead = lead


class TimelineError(RuntimeError):
    pass


@dataclass
class ForecastPlan:
    horizon: int
    steps: List[int]

    @property
    def invocations(self) -> int:
        return len(self.steps)

    def offsets(self) -> List[int]:
        """Cursor positions after each step."""
        return list(np.cumsum(self.steps).astype(int))

    def dump(self) -> str:
        return (f"horizon: {self.horizon}\n"
                f"steps: [{', '.join(str(s) for s in self.steps)}]\n"
                f"invocations: {self.invocations}\n")


def greedy_plan(horizon: int, leads: Sequence[int] = DEFAULT_LEADS) -> ForecastPlan:
    """Repeatedly take the largest lead not exceeding the remaining horizon."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    avail = sorted(set(int(x) for x in leads), reverse=True)
    if 1 not in avail:
        raise ValueError("lead set must contain 1 hour")
    steps, rem = [], horizon
    while rem:
        lead = next(x for x in avail if x <= rem)
        steps.append(lead)
        rem -= lead
    return ForecastPlan(horizon, steps)


def invocation_profile(max_horizon: int, leads: Sequence[int] = DEFAULT_LEADS) -> Dict[int, int]:
    if max_horizon < 1:
        raise ValueError("max_horizon must be >= 1")
    return {h: greedy_plan(h, leads).invocations for h in range(1, max_horizon + 1)}


# A model is anything mapping (state lead hours ago, current state, lead, cursor) -> next state.
StepModel = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


@dataclass
class Forecast:
    timeline: Dict[int, np.ndarray]
    invocations: Dict[int, int]
    produced: List[int] = field(default_factory=list)

    def hourly(self, horizon: int) -> np.ndarray:
        return np.stack([self.timeline[h] for h in range(1, horizon + 1)])


class Composer:
    """Walks greedy plans over a timeline seeded with observations at offsets <= 0.

    ``models[lead](x_back, x_now, cursor)`` returns the state ``lead`` hours
    after ``cursor``; ``x_back`` is the state ``lead`` hours before it.
    Entries for positive offsets come only from the composer's own writes;
    a missing observation is reported only when a step actually needs it.
    """

    def __init__(self, models: Mapping[int, Callable], history: Mapping[int, np.ndarray],
                 leads: Sequence[int] = DEFAULT_LEADS):
        self.models = dict(models)
        self.leads = tuple(leads)
        if 0 not in history:
            raise TimelineError("history lacks the observation at offset 0")
        self.timeline: Dict[int, np.ndarray] = {int(k): np.asarray(v) for k, v in history.items() if k <= 0}
        self.invocations: Dict[int, int] = {k: 0 for k in self.timeline}
        self.produced: List[int] = []

    def _read(self, offset: int) -> np.ndarray:
        if offset not in self.timeline:
            if offset <= 0:
                raise TimelineError(f"observation at offset {offset} not available")
            self.ensure(offset)
        return self.timeline[offset]

    def _step(self, cursor: int, lead: int) -> None:
        target = cursor + lead
        if target in self.timeline:
            return
        if lead not in self.models:
            raise MissingCheckpointError(lead)
        x_back = self._read(cursor - lead)
        x_now = self._read(cursor)
        self.timeline[target] = np.asarray(self.models[lead](x_back, x_now, cursor))
        self.invocations[target] = self.invocations[cursor] + 1
        self.produced.append(target)

    def run(self, plan: ForecastPlan) -> None:
        for lead in plan.steps:
            if lead not in self.models:
                raise MissingCheckpointError(lead)
        cursor = 0
        for lead in plan.steps:
            self._step(cursor, lead)
            cursor += lead

    def ensure(self, offset: int) -> None:
        """Produce ``offset`` via its own greedy plan (inputs are produced on demand)."""
        if offset not in self.timeline:
            self.run(greedy_plan(offset, self.leads))


def compose_forecast(plan: ForecastPlan, models: Mapping[int, Callable], history: Mapping[int, np.ndarray],
                     leads: Sequence[int] = DEFAULT_LEADS) -> Forecast:
    """Run one plan; intermediate states a step needs are produced by their own greedy plans."""
    comp = Composer(models, history, leads)
    comp.run(plan)
    out = {k: v for k, v in comp.timeline.items() if 1 <= k <= plan.horizon}
    return Forecast(out, {k: comp.invocations[k] for k in out}, comp.produced)


def forecast_hourly(horizon: int, models: Mapping[int, Callable], history: Mapping[int, np.ndarray],
                    leads: Sequence[int] = DEFAULT_LEADS) -> Forecast:
    """States for every hour 1..horizon, each from the greedy plan for that hour."""
    greedy_plan(horizon, leads)
    comp = Composer(models, history, leads)
    for h in range(1, horizon + 1):
        comp.ensure(h)
    out = {k: comp.timeline[k] for k in range(1, horizon + 1)}
    return Forecast(out, {k: comp.invocations[k] for k in out}, comp.produced)
