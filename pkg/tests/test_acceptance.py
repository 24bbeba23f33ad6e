"""One pass/fail test per acceptance criterion."""

import json
import time
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from oracles import dummy_ols, hc1, oster_exact, sandwich
from scipy.stats import ks_2samp

from panelsynth.dgp import DgpConfig, covariate_names, simulate_panel, simulate_sparse_confounded, sparse_confounded_config
from panelsynth.encoder import decode_value, em_fit, encode_value, fit_modes
from panelsynth.errors import CollinearityError
from panelsynth.estimator import cluster_vcov, fit_event_study, pretrend_joint_test
from panelsynth.fidelity import evaluate_all
from panelsynth.generator import GenConfig, augment, generate, train
from panelsynth.panel import (
    LongPanel,
    Schema,
    VariableSpec,
    WideTable,
    column_sentinels,
    to_long_with_rules,
    to_wide,
)
from panelsynth.pipeline import PipelineConfig, run_pipeline
from panelsynth.robustness import fit_ols, matched_event_study, oster_bounds

EFFECTS = (0.2, -0.5, -0.8)


# ---- 1 ----------------------------------------------------------------------------------------


def small_panel(seed):
    rng = np.random.default_rng(seed)
    n_units = int(rng.integers(4, 11))
    waves = int(rng.integers(3, 7))
    window = (-(waves // 2), waves - waves // 2 - 1)
    rows = []
    for u in range(n_units):
        for t in range(window[0], window[1] + 1):
            if t in (-1, 0) or rng.random() < 0.8:
                rows.append((u, t, u % 2, rng.normal(), rng.normal() + (u % 2) * (t >= 0)))
    df = pd.DataFrame(rows, columns=["unit", "tau", "treated", "x", "y"])
    schema = Schema([VariableSpec("x", "dynamic", "continuous"), VariableSpec("y", "dynamic", "continuous")], outcome="y")
    return LongPanel(df, schema), window


def test_c01_twfe_oracle_equivalence():
    start = time.perf_counter()
    checked, seed = 0, 0
    while checked < 50:
        p, window = small_panel(seed)
        seed += 1
        try:
            r = fit_event_study(p, covariates=["x"], window=window)
        except CollinearityError:
            continue
        df = p.data
        want = dummy_ols(df.y, df.treated, df.tau, df.unit, range(window[0], window[1] + 1), df[["x"]].to_numpy())
        got = np.r_[r.coefficients.estimate.to_numpy(), r.gamma.estimate.to_numpy()]
        assert np.max(np.abs(got - want)) < 1e-8, seed - 1
        checked += 1
    assert seed < 100
    assert time.perf_counter() - start < 10


# ---- 2 ----------------------------------------------------------------------------------------


def test_c02_known_effect_recovery():
    start = time.perf_counter()
    truth = np.array([0.0, 0.0, *EFFECTS])
    est, cover = [], []
    for rep in range(200):
        p, _ = simulate_panel(DgpConfig(n_treated=200, n_control=200, effects=EFFECTS, seed=rep))
        c = fit_event_study(p, covariates=["x"]).coefficients
        assert c.tau.tolist() == [-3, -2, 0, 1, 2]
        est.append(c.estimate.to_numpy())
        cover.append((c.ci_low.to_numpy() <= truth) & (truth <= c.ci_high.to_numpy()))
    bias = np.mean(est, axis=0) - truth
    coverage = np.mean(cover, axis=0)
    assert np.all(np.abs(bias) <= 0.05), bias
    assert np.all((coverage >= 0.90) & (coverage <= 0.98)), coverage
    assert time.perf_counter() - start < 300


# ---- 3 ----------------------------------------------------------------------------------------


def test_c03_pretrend_calibration():
    start = time.perf_counter()
    reject = []
    for rep in range(500):
        p, _ = simulate_panel(DgpConfig(n_treated=200, n_control=200, seed=10_000 + rep))
        reject.append(pretrend_joint_test(fit_event_study(p, covariates=["x"])).p_value < 0.05)
    rate = np.mean(reject)
    assert 0.03 <= rate <= 0.08, rate
    assert time.perf_counter() - start < 300


# ---- 4 and 5 ------------------------------------------------------------------------------------

QUICK = GenConfig(hidden_widths=(64, 64), batch_size=32, epochs=3, seed=2)


@pytest.fixture(scope="module")
def eurod_real():
    cfg = DgpConfig(n_treated=80, n_control=120, eurod_mode=True, include_age=True, attrition=0.3, seed=6)
    return simulate_panel(cfg)[0]


@pytest.fixture(scope="module")
def eurod_synth(eurod_real):
    return augment(eurod_real, eurod_real.schema, QUICK, n_target_per_arm=1000)


def test_c04_skeleton_injection_exact(eurod_real, eurod_synth):
    start = time.perf_counter()
    real = to_wide(eurod_real)
    syn = to_wide(eurod_synth)
    assert syn.n_rows == 2000
    for arm in (0, 1):
        real_rows = {tuple(r) for r in real.skeleton[real.treatment == arm].tolist()}
        syn_rows = syn.skeleton[syn.treatment == arm]
        assert len(syn_rows) == 1000
        assert all(tuple(r) in real_rows for r in syn_rows.tolist())
    assert time.perf_counter() - start < 120


def test_c05_output_legality(eurod_real, eurod_synth):
    y = eurod_synth.data["eurod"].dropna()
    assert len(y) > 2000
    assert np.all(y == np.round(y)) and y.between(0, 12).all()
    wide = to_wide(eurod_real)
    sentinels = set(wide.sentinels[wide.n_skeleton:].tolist())
    for emitted in (eurod_synth, to_long_with_rules(wide)):
        for v in emitted.schema.dynamic:
            assert not emitted.data[v.name].isin(sentinels).any(), v.name


# ---- 6 ------------------------------------------------------------------------------------------------

TOY_SCHEMA = Schema([VariableSpec("x", "static", "binary"), VariableSpec("y", "dynamic", "continuous")], outcome="y")


def toy_table(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n).astype(float)
    y = np.where(x == 1, rng.normal(2, 0.5, n), rng.normal(-2, 0.5, n))
    z = np.zeros(n)
    values = np.column_stack([x, z, z, z, y])
    cols = ("x", "treated", "y_baseline", "y@-1", "y@0")
    return WideTable(values, np.arange(n), cols, 3, (-1, 0), column_sentinels(TOY_SCHEMA, (-1, 0)), TOY_SCHEMA)


def test_c06_generator_two_mode_toy():
    start = time.perf_counter()
    model = train(toy_table(1000, 0), TOY_SCHEMA, GenConfig(epochs=300, seed=0))
    held = toy_table(1000, 1)
    for xv, mean in ((0.0, -2.0), (1.0, 2.0)):
        g = generate(model, np.tile([xv, 0.0, 0.0], (500, 1)), seed=5)[:, 1]
        real = held.values[held.values[:, 0] == xv, 4]
        assert abs(g.mean() - mean) <= 0.5, (xv, g.mean())
        assert ks_2samp(g, real).statistic < 0.15, xv
    assert time.perf_counter() - start < 300


# ---- 7 ------------------------------------------------------------------------------------------------


def test_c07_encoder_round_trip_and_em():
    rng = np.random.default_rng(0)
    data = np.concatenate([rng.normal(0, 1, 1500), rng.normal(10, 2, 1500)])
    model = fit_modes(data, seed=0)
    assert model.n_modes >= 2
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(model.n_modes))
        x = rng.uniform(model.means[k] - 4 * model.stds[k], model.means[k] + 4 * model.stds[k])
        worst = max(worst, abs(decode_value(encode_value(x, model, k), model, k) - x))
    assert worst < 1e-6
    for seed in range(20):
        x = np.concatenate([rng.normal(0, 1, 300), rng.exponential(2, 200) + 5])
        for k in (1, 2, 3, 5):
            *_, trace = em_fit(x, k, 1e-4 * np.ptp(x), seed=seed)
            assert np.all(np.diff(trace) >= -1e-12), (seed, k)


# ---- 8 ------------------------------------------------------------------------------------------------


def test_c08_fidelity_identity():
    p, _ = simulate_panel(DgpConfig(n_treated=100, n_control=100, attrition=0.2, seed=1))
    rep = evaluate_all(p, p)
    assert rep.ks_score == 1.0
    assert rep.mape == 0.0
    assert rep.corr_diff == 0.0
    assert 0.45 <= rep.adversarial_accuracy <= 0.55
    assert rep.pretrend_preservation == 1.0


# ---- 9 ------------------------------------------------------------------------------------------------

RESCUE_GEN = dict(hidden_widths=(64, 64), batch_size=20, epochs=150, learning_rate=1e-3)


@pytest.mark.slow
def test_c09_common_support_rescue():
    start = time.perf_counter()
    passed = []
    for seed in range(50):
        cfg = sparse_confounded_config(seed=seed)
        p, _ = simulate_sparse_confounded(cfg)
        covs = covariate_names(cfg.n_covariates)
        raw = matched_event_study(p, covs, covariates=["x"])
        raw_p = pretrend_joint_test(fit_event_study(p, covariates=["x"])).p_value
        pathology = raw.matched.matched_fraction < 0.5 and raw_p < 0.05

        targets = {0: 10 * cfg.n_control, 1: 10 * cfg.n_treated}
        syn = augment(p, p.schema, GenConfig(seed=seed, **RESCUE_GEN), n_target_per_arm=targets)
        aug = LongPanel(pd.concat([p.data.assign(synthetic=False), syn.data], ignore_index=True), p.schema)
        res = matched_event_study(aug, covs, covariates=["x"]).result
        rescued = bool((res.pre_terms.estimate.abs() < 0.1).all()) and pretrend_joint_test(res).p_value > 0.05
        passed.append(pathology and rescued)
    assert np.mean(passed) >= 0.8, f"{sum(passed)}/50 seeds"
    assert time.perf_counter() - start < 1200


# ---- 10 -----------------------------------------------------------------------------------------------


def orthogonal(n, k, seed=0):
    m = np.random.default_rng(seed).normal(size=(n, k))
    m -= m.mean(axis=0)
    q, _ = np.linalg.qr(m)
    return q * np.sqrt(n)


def test_c10_oster_oracle():
    n = 500
    d, u, e = orthogonal(n, 3).T
    e = e * np.sqrt(0.5)
    y = d + 0.4 * u + e
    w = d + u
    tss = Fraction(166, 100)
    r_tilde = 1 - Fraction(50, 100) / tss
    r_dot = 1 - Fraction(66, 100) / tss
    controlled = fit_ols(y, np.column_stack([d, w]), ["d", "w"])
    uncontrolled = fit_ols(y, d, ["d"])
    assert controlled.coef["d"] == pytest.approx(0.6, abs=1e-12)
    assert uncontrolled.coef["d"] == pytest.approx(1.0, abs=1e-12)
    assert controlled.r_squared == pytest.approx(float(r_tilde), abs=1e-12)
    assert uncontrolled.r_squared == pytest.approx(float(r_dot), abs=1e-12)

    got = oster_bounds(controlled, uncontrolled, term="d")
    star, delta, rmax = oster_exact(Fraction(3, 5), r_tilde, Fraction(1), r_dot, Fraction(13, 10))
    assert got.r_max == pytest.approx(float(rmax), abs=1e-12)
    assert got.r_max == pytest.approx(1.3 * got.r_tilde, abs=1e-12)
    assert abs(got.delta_for_zero - float(delta)) < 1e-6
    assert abs(got.beta_star_at_delta_1 - float(star)) < 1e-6

    y2 = 1.4 * d + 0.4 * u + e
    capped = oster_bounds(fit_ols(y2, np.column_stack([d, w]), ["d", "w"]), fit_ols(y2, d, ["d"]), term="d")
    assert capped.r_tilde * 1.3 > 1 and capped.r_max == 1.0


# ---- 11 -----------------------------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_c11_cluster_sandwich(seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 7, size=int(rng.integers(3, 12)))
    clusters = np.repeat(np.arange(len(sizes)) * 7 + 3, sizes)
    n, p = len(clusters), int(rng.integers(1, 4))
    if n <= p + 2:
        clusters = np.r_[clusters, [999] * (p + 3)]
        n = len(clusters)
    x = rng.normal(size=(n, p))
    e = rng.normal(size=n) * (1 + np.abs(x[:, 0]))
    k = p + int(rng.integers(0, 2))
    assert np.max(np.abs(cluster_vcov(x, e, clusters, k=k) - sandwich(x, e, list(clusters), k))) < 1e-10
    ids = np.arange(n)
    assert np.max(np.abs(cluster_vcov(x, e, ids, k=p) - hc1(x, e, p))) < 1e-10


# ---- 12 -----------------------------------------------------------------------------------------------


def test_c12_end_to_end_determinism(tmp_path):
    sim, _ = simulate_panel(DgpConfig(n_treated=30, n_control=60, selection=1.0, eurod_mode=True, seed=4))
    sim.to_csv(tmp_path / "panel.csv")
    (tmp_path / "schema.json").write_text(json.dumps(sim.schema.to_dict()))
    base = {
        "schema_path": "schema.json",
        "input": {"panel": "panel.csv"},
        "seed": 7,
        "generator": {"hidden_widths": [32, 32], "batch_size": 8, "epochs": 3},
        "augment": {"factor": 2},
        "matching": {"covariates": ["z1", "z2"]},
        "estimation": {"covariates": ["x"]},
        "robustness": {"subgroup_column": None},
    }
    manifests = []
    for run in ("a", "b"):
        cfg = PipelineConfig.from_dict({**base, "output_dir": f"out_{run}"}, base_dir=tmp_path)
        outcome = run_pipeline(cfg)
        assert outcome.status == 0, outcome.error
        manifests.append({a["file"]: a["sha256"] for a in outcome.manifest["artifacts"]})
    a, b = manifests
    assert a.keys() == b.keys()
    numeric = [f for f in a if not f.endswith(".png")]
    assert any(f.endswith("augmented_panel.csv") for f in numeric)
    for f in numeric:
        assert a[f] == b[f], f
        assert (tmp_path / "out_a" / f).read_bytes() == (tmp_path / "out_b" / f).read_bytes()
