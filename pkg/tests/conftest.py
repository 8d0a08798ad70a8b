from __future__ import annotations

import math

import numpy as np
import pytest

from vecplan.scenario_model import (
    AgentHypotheses,
    AgentState,
    Belief,
    EgoState,
    IntentionSpec,
    ModelParams,
    ReferencePath,
)


@pytest.fixture
def params() -> ModelParams:
    return ModelParams()


@pytest.fixture
def straight_path() -> ReferencePath:
    return ReferencePath.straight((0.0, 0.0), (600.0, 0.0))


@pytest.fixture
def arc_path() -> ReferencePath:
    """Quarter circle of radius 50, sampled densely enough to act curved."""
    t = np.linspace(0.0, math.pi / 2.0, 101)
    pts = np.stack([50.0 * np.sin(t), 50.0 * (1.0 - np.cos(t))], axis=1)
    return ReferencePath(pts)


def keep_intention(speed: float, probability: float = 1.0) -> IntentionSpec:
    return IntentionSpec("keep", probability, target_speed=speed)


def brake_intention(probability: float, accel: float = 2.0) -> IntentionSpec:
    return IntentionSpec("yield", probability, target_speed=0.0, accel=accel)


def drift_intention(
    probability: float, offset: float, rate: float = 1.0, speed: float = 8.0
) -> IntentionSpec:
    return IntentionSpec(
        "cutin", probability, target_speed=speed,
        lateral_offset=offset, lateral_rate=rate,
    )


def single_agent_belief(*intentions: IntentionSpec) -> Belief:
    return Belief((AgentHypotheses(tuple(intentions)),))


@pytest.fixture
def ego_at_origin() -> EgoState:
    return EgoState(10.0, 0.0, 0.0, 13.9)


def agent(x: float, y: float, heading: float = 0.0, speed: float = 8.0) -> AgentState:
    return AgentState(x, y, heading, speed, 2.3, 0.9)
