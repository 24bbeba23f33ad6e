import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from panelsynth.panel import LongPanel, Schema, VariableSpec  # noqa: E402


def small_schema(with_age=False):
    vars_ = [
        VariableSpec("wealth", "static", "continuous"),
        VariableSpec("female", "static", "binary"),
    ]
    if with_age:
        vars_.append(VariableSpec("age", "dynamic", "continuous", evolution_rule=2.0))
    vars_ += [
        VariableSpec("x", "dynamic", "continuous"),
        VariableSpec("eurod", "dynamic", "ordinal", bounds=(0, 12), round_to_integer=True),
    ]
    return Schema(vars_, eurod_outcome=True)


def random_panel(rng, n_units=8, window=(-3, 2), with_age=False, gaps=True):
    """Random aligned panel; every unit keeps tau=-1 and tau=0, edges may drop."""
    schema = small_schema(with_age)
    lo, hi = window
    rows = []
    for u in range(n_units):
        first = int(rng.integers(lo, 0)) if gaps else lo
        last = int(rng.integers(0, hi + 1)) if gaps else hi
        wealth = float(np.round(rng.normal(10, 3), 3))
        female = float(rng.integers(0, 2))
        d = u % 2
        age0 = float(rng.integers(60, 90))
        for t in range(first, last + 1):
            row = {"unit": u, "tau": t, "treated": d, "wealth": wealth, "female": female}
            if with_age:
                row["age"] = age0 + 2.0 * (t + 1)
            row["x"] = float(np.round(rng.normal(), 4))
            row["eurod"] = float(rng.integers(0, 13))
            rows.append(row)
    return LongPanel(pd.DataFrame(rows)[schema.columns], schema)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def schema():
    return small_schema()
