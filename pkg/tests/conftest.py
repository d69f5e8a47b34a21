"""Shared fixtures. Bundled scenarios are parsed once per session; games and
protocols are rebuilt per use (they are cheap and the builders are pure).
"""

from pathlib import Path

import numpy as np
import pytest

import gamedyn as gd

SCENARIO_DIR = Path(gd.__file__).resolve().parent / "scenarios"

ALL_SCENARIOS = ("constant", "coordination", "pigou", "parallel3",
                 "homogeneous", "tolls", "series2", "wheatstone")

_cache: dict[str, gd.Scenario] = {}


def get_scenario(name: str) -> gd.Scenario:
    if name not in _cache:
        _cache[name] = gd.load_scenario(SCENARIO_DIR / f"{name}.scn")
    return _cache[name]


@pytest.fixture
def rng():
    return np.random.default_rng(20260825)
