import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import oster_exact

from panelsynth.dgp import DgpConfig, covariate_names, simulate_panel
from panelsynth.errors import StabilityUndefinedError
from panelsynth.estimator import term_name
from panelsynth.panel import LongPanel
from panelsynth.robustness import (
    OsterResult,
    fit_ols,
    matched_event_study,
    oster_bounds,
    oster_json,
    oster_table,
    oster_values,
    subgroup_rerun,
    uncontrolled_fit,
)


def test_formula_example():
    r = oster_values(0.5, 0.4, 1.0, 0.2, 1.3)
    star, delta, rmax = oster_exact(0.5, 0.4, 1.0, 0.2, 1.3)
    assert r.r_max == pytest.approx(0.52, abs=1e-15)
    assert r.beta_star_at_delta_1 == pytest.approx(0.2, abs=1e-12)
    assert r.delta_for_zero == pytest.approx(5 / 3, abs=1e-12)
    assert (r.beta_star_at_delta_1, r.delta_for_zero, r.r_max) == pytest.approx((star, delta, rmax), abs=1e-12)
    assert r.bound_interval == (r.beta_star_at_delta_1, 0.5)
    assert r.classification == "Robust"


def test_stable_coefficient_infinite_delta():
    r = oster_values(0.5, 0.4, 0.5, 0.2)
    assert math.isinf(r.delta_for_zero) and r.delta_for_zero > 0
    assert r.bound_interval == (0.5, 0.5)
    assert r.classification == "Very Robust"


def test_equal_r_squared_undefined():
    with pytest.raises(StabilityUndefinedError):
        oster_values(0.5, 0.45, 0.7, 0.45)


def test_r_max_capped_at_one():
    assert oster_values(0.5, 0.9, 1.0, 0.5).r_max == 1.0


def test_fragile_when_straddling_zero():
    r = oster_values(0.1, 0.4, 0.5, 0.2)
    assert r.bound_interval[0] < 0 < r.bound_interval[1]
    assert r.classification == "Fragile"


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 0.7), st.floats(-3, 3), st.floats(0.0, 0.04))
def test_classification_pure_function_of_fields(bt, rt, bd, rd):
    r = oster_values(bt, rt, bd, rd)
    again = OsterResult.from_dict(r.to_dict())
    assert again.classification == r.classification
    lo, hi = r.bound_interval
    if lo > 0 or hi < 0:
        assert r.classification in ("Robust", "Very Robust", "Sensitive")
        if r.delta_for_zero > 1:
            assert r.classification in ("Robust", "Very Robust")
    else:
        assert r.classification == "Fragile"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50))
def test_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    n = 200
    d = rng.normal(size=n)
    w = 0.5 * d + rng.normal(size=n)
    y = 0.7 * d + 0.8 * w + rng.normal(size=n)
    a = oster_bounds(fit_ols(y, np.column_stack([d, w]), ["d", "w"]), fit_ols(y, d, ["d"]), term="d")
    b = oster_bounds(fit_ols(c * y, np.column_stack([d, w]), ["d", "w"]), fit_ols(c * y, d, ["d"]), term="d")
    assert b.beta_tilde == pytest.approx(c * a.beta_tilde, rel=1e-9)
    assert b.beta_dot == pytest.approx(c * a.beta_dot, rel=1e-9)
    assert b.beta_star_at_delta_1 == pytest.approx(c * a.beta_star_at_delta_1, rel=1e-9, abs=1e-12)
    assert b.delta_for_zero == pytest.approx(a.delta_for_zero, rel=1e-8)


def test_json_infinite_delta():
    text = oster_json([oster_values(0.5, 0.4, 0.5, 0.2)])
    assert '"delta_for_zero": "inf"' in text


# ---- matched event study and subgroups ----------------------------------------------------


@pytest.fixture(scope="module")
def dgp_panel():
    return simulate_panel(DgpConfig(n_treated=80, n_control=120, selection=1.0, seed=5))[0]


COVS = covariate_names(2)


def test_matched_event_study_and_oster_table(dgp_panel):
    a = matched_event_study(dgp_panel, COVS, covariates=["x"])
    assert a.matched.pairs and a.balance.n_treated_after == len(a.matched.pairs)
    unc = uncontrolled_fit(dgp_panel, a.matched)
    table = oster_table(a.result, unc)
    assert [r.term for r in table] == [term_name(t) for t in (0, 1, 2)]
    assert all(r.r_dot <= r.r_tilde <= r.r_max <= 1 for r in table)


def test_single_label_reproduces_pooled(dgp_panel):
    pooled = matched_event_study(dgp_panel, COVS, covariates=["x"])
    rep = subgroup_rerun(dgp_panel, {u: "all" for u in dgp_panel.units}, COVS, covariates=["x"])
    got = rep.results["all"]
    assert got.coefficients.equals(pooled.result.coefficients)
    assert got.vcov.tobytes() == pooled.result.vcov.tobytes()


def test_identical_labels_identical_results(dgp_panel):
    copy = dgp_panel.data.copy()
    copy["unit"] = copy["unit"] + 10_000
    both = LongPanel(pd.concat([dgp_panel.data, copy], ignore_index=True), dgp_panel.schema)
    grouping = {u: ("a" if u < 10_000 else "b") for u in both.units}
    rep = subgroup_rerun(both, grouping, COVS)
    a, b = rep.results["a"], rep.results["b"]
    assert a.coefficients[["estimate", "se"]].equals(b.coefficients[["estimate", "se"]])


def test_controls_only_label_skipped(dgp_panel):
    arm = dgp_panel.unit_treatment()
    grouping = {u: ("mixed" if arm[u] == 1 or u % 2 else "controls") for u in dgp_panel.units}
    grouping.update({u: "controls" for u in arm.index[arm == 0][:10]})
    rep = subgroup_rerun(dgp_panel, grouping, COVS)
    assert rep.skipped.get("controls") == "no treated units"
    assert "mixed" in rep.results
