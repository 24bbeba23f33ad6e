"""Matched event study, Oster coefficient-stability bounds and subgroup reruns."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from panelsynth.errors import DataError, PanelSynthError, StabilityUndefinedError
from panelsynth.estimator import fit_event_study, term_name
from panelsynth.matching import balance_report, fit_propensity, match_caliper
from panelsynth.panel import DEFAULT_WINDOW

logger = logging.getLogger(__name__)

R_MAX_FACTOR = 1.3
VERY_ROBUST_DELTA = 10.0
APPROXIMATION = "proportional selection, linear in delta"


@dataclass
class MatchedAnalysis:
    propensity: object
    matched: object
    balance: object
    result: object


def matched_event_study(panel, match_covariates, covariates=(), window=DEFAULT_WINDOW, caliper=0.2):
    """Propensity-score caliper matching on baseline covariates, then TWFE on the pairs."""
    s = panel.schema
    base = panel.baseline()
    d = base[s.treatment].to_numpy(int)
    x = base[list(match_covariates)]
    model = fit_propensity(x, d)
    matched = match_caliper(
        model.linear_predictor(x), d, caliper_multiplier=caliper, unit_ids=base.index.to_numpy(), scale="logit"
    )
    balance = balance_report(base, d, matched, list(match_covariates))
    if not matched.pairs:
        raise DataError("caliper matching produced no pairs")
    result = fit_event_study(panel, sample=matched, covariates=covariates, window=window, label="matched")
    return MatchedAnalysis(model, matched, balance, result)


@dataclass
class LinearFit:
    """Minimal fit record: named coefficients and the model R-squared."""

    coef: dict
    r_squared: float

    def estimate(self, term):
        return self.coef[term]


def fit_ols(y, x, names):
    """OLS with an intercept; returns coefficients by name and the R-squared."""
    y = np.asarray(y, float)
    design = np.column_stack([np.ones(len(y)), np.asarray(x, float).reshape(len(y), -1)])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    r2 = 1 - resid @ resid / ((y - y.mean()) ** 2).sum()
    return LinearFit(dict(zip(["intercept"] + list(names), beta.tolist())), float(r2))


def _coef_and_r2(fit, term):
    if hasattr(fit, "coefficients"):
        row = fit.coefficients.loc[fit.coefficients["term"] == term, "estimate"]
        if row.empty:
            raise KeyError(term)
        return float(row.iloc[0]), float(fit.r2_overall)
    return float(fit.estimate(term)), float(fit.r_squared)


@dataclass
class OsterResult:
    term: str
    beta_tilde: float
    r_tilde: float
    beta_dot: float
    r_dot: float
    r_max: float
    delta_for_zero: float
    beta_star_at_delta_1: float
    bound_interval: tuple
    approximation: str = APPROXIMATION

    @property
    def classification(self):
        lo, hi = self.bound_interval
        excludes_zero = lo > 0 or hi < 0
        if not excludes_zero:
            return "Fragile"
        if self.delta_for_zero > VERY_ROBUST_DELTA:
            return "Very Robust"
        if self.delta_for_zero > 1:
            return "Robust"
        return "Sensitive"

    def to_dict(self):
        d = asdict(self)
        d["bound_interval"] = list(self.bound_interval)
        if math.isinf(self.delta_for_zero):
            d["delta_for_zero"] = "inf" if self.delta_for_zero > 0 else "-inf"
        d["classification"] = self.classification
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("classification", None)
        d["delta_for_zero"] = float(d["delta_for_zero"])
        d["bound_interval"] = tuple(d["bound_interval"])
        return cls(**d)


def oster_values(beta_tilde, r_tilde, beta_dot, r_dot, r_max_factor=R_MAX_FACTOR, term=""):
    r_max = min(r_max_factor * r_tilde, 1.0)
    if not r_dot <= r_tilde <= r_max <= 1:
        if r_tilde == r_dot:
            raise StabilityUndefinedError("controls add no explanatory power; delta is undefined")
        raise StabilityUndefinedError(
            f"R-squared ordering violated: r_dot={r_dot}, r_tilde={r_tilde}, r_max={r_max}"
        )
    if r_tilde == r_dot:
        raise StabilityUndefinedError("controls add no explanatory power; delta is undefined")
    move = beta_dot - beta_tilde
    if move == 0:
        delta = math.inf
        star = beta_tilde
    else:
        star = beta_tilde - move * (r_max - r_tilde) / (r_tilde - r_dot)
        denom = move * (r_max - r_tilde)
        delta = beta_tilde * (r_tilde - r_dot) / denom if denom != 0 else math.inf
    bound = (min(beta_tilde, star), max(beta_tilde, star))
    return OsterResult(term, beta_tilde, r_tilde, beta_dot, r_dot, r_max, delta, star, bound)


def oster_bounds(controlled_fit, uncontrolled_fit, r_max_factor=R_MAX_FACTOR, term=None):
    """Bounds for one treatment coefficient; ``term`` defaults to the tau=0 interaction."""
    term = term_name(0) if term is None else term
    b_t, r_t = _coef_and_r2(controlled_fit, term)
    b_d, r_d = _coef_and_r2(uncontrolled_fit, term)
    return oster_values(b_t, r_t, b_d, r_d, r_max_factor, term)


def oster_table(controlled, uncontrolled, r_max_factor=R_MAX_FACTOR):
    """Oster results for every post-period coefficient."""
    out = []
    for tau in controlled.coefficients["tau"]:
        if tau >= 0:
            out.append(oster_bounds(controlled, uncontrolled, r_max_factor, term_name(int(tau))))
    return out


def uncontrolled_fit(panel, sample, window=DEFAULT_WINDOW):
    """Baseline model: treatment x event-time dummies and time effects only."""
    return fit_event_study(panel, sample=sample, covariates=(), window=window, unit_effects=False, label="uncontrolled")


@dataclass
class SubgroupReport:
    results: dict = field(default_factory=dict)
    matches: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "labels": sorted(map(str, self.results)),
            "matches": {str(k): v.matched.to_dict() for k, v in self.matches.items()},
            "skipped": {str(k): v for k, v in self.skipped.items()},
        }


def subgroup_rerun(panel, grouping, match_covariates, covariates=(), window=DEFAULT_WINDOW, caliper=0.2):
    """Re-run matching and estimation independently within each label.

    ``grouping`` maps unit id to label (dict or Series). Labels without both
    arms, or whose matching or estimation fails, are recorded in ``skipped``.
    """
    grouping = pd.Series(grouping)
    arm = panel.unit_treatment()
    report = SubgroupReport()
    for label in sorted(grouping.unique(), key=str):
        units = set(grouping.index[grouping == label])
        members = [u for u in panel.units if u in units]
        d = arm.loc[members] if members else arm.iloc[:0]
        if not (d == 1).any():
            report.skipped[label] = "no treated units"
            continue
        if not (d == 0).any():
            report.skipped[label] = "no control units"
            continue
        sub = panel.subset_units(members)
        try:
            analysis = matched_event_study(sub, match_covariates, covariates, window, caliper)
        except PanelSynthError as exc:
            logger.warning("subgroup %s failed: %s", label, exc)
            report.skipped[label] = f"{type(exc).__name__}: {exc}"
            continue
        report.results[label] = analysis.result
        report.matches[label] = analysis
    return report


def oster_json(results):
    return json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True)
