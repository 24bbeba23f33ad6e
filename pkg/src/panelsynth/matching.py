"""Propensity scores, caliper matching and balance diagnostics."""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from panelsynth.errors import DataError, FitError, SeparationError

logger = logging.getLogger(__name__)

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 50
DEFAULT_CALIPER = 0.2
SMD_THRESHOLD = 0.1


@dataclass
class PropensityModel:
    """Logistic propensity model on internally standardized covariates.

    ``coef[0]`` is the intercept; ``coef[1:]`` are slopes per standardized
    covariate, all on the log-odds scale.
    """

    coef: np.ndarray
    names: list
    center: np.ndarray
    scale: np.ndarray
    converged: bool
    iterations: int

    def linear_predictor(self, covariates):
        x = _as_matrix(covariates, self.names)
        z = (x - self.center) / self.scale
        return self.coef[0] + z @ self.coef[1:]

    def predict(self, covariates):
        eta = self.linear_predictor(covariates)
        return 1.0 / (1.0 + np.exp(-eta))

    def to_dict(self):
        return {
            "intercept": float(self.coef[0]),
            "coefficients": {n: float(c) for n, c in zip(self.names, self.coef[1:])},
            "converged": self.converged,
            "iterations": self.iterations,
        }


def _as_matrix(covariates, names=None):
    if isinstance(covariates, pd.DataFrame):
        cols = names if names is not None else list(covariates.columns)
        return covariates[cols].to_numpy(float)
    x = np.asarray(covariates, float)
    return x.reshape(len(x), -1) if x.ndim != 2 else x


def fit_propensity(baseline, treatment, names=None):
    """Logistic regression by iteratively reweighted least squares.

    Stops when the score's max-norm falls below 1e-8 or after 50 iterations.
    Raises :class:`SeparationError` if any iterate's linear predictor
    separates the arms, since the MLE then does not exist.
    """
    if isinstance(baseline, pd.DataFrame):
        names = list(baseline.columns) if names is None else names
    x = _as_matrix(baseline, names)
    y = np.asarray(treatment, float)
    n, p = x.shape
    names = names or [f"x{j}" for j in range(p)]
    if not ((y == 1).any() and (y == 0).any()):
        raise DataError("propensity model needs at least one unit in each arm")
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    flat = np.flatnonzero(scale == 0)
    if len(flat):
        raise FitError(f"covariate {names[flat[0]]!r} has zero variance")
    design = np.column_stack([np.ones(n), (x - center) / scale])
    beta = np.zeros(p + 1)
    beta[0] = np.log(y.mean() / (1 - y.mean()))
    converged = False
    it = 0
    for it in range(1, IRLS_MAX_ITER + 1):
        eta = design @ beta
        if p and eta[y == 1].min() > eta[y == 0].max():
            raise SeparationError(
                "treatment is perfectly separated by the covariates; reduce the covariate set"
            )
        mu = 1.0 / (1.0 + np.exp(-eta))
        grad = design.T @ (y - mu)
        if np.abs(grad).max() < IRLS_TOL:
            converged = True
            it -= 1
            break
        w = mu * (1 - mu)
        hess = design.T @ (design * w[:, None])
        try:
            beta = beta + np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("information matrix is singular; reduce the covariate set") from exc
    if not converged:
        eta = design @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        converged = bool(np.abs(design.T @ (y - mu)).max() < IRLS_TOL)
        if not converged:
            if np.min(mu * (1 - mu)) < 1e-12 or np.abs(beta).max() > 50:
                raise SeparationError("IRLS diverged towards quasi-separation; reduce the covariate set")
            logger.warning("propensity IRLS did not converge in %d iterations", IRLS_MAX_ITER)
    if not np.all(np.isfinite(beta)):
        raise FitError("non-finite propensity coefficients")
    return PropensityModel(beta, list(names), center, scale, converged, it)


@dataclass
class MatchedSet:
    pairs: list
    dropped_treated: list
    dropped_controls: list
    caliper_used: float

    @property
    def treated_units(self):
        return [t for t, _, _ in self.pairs]

    @property
    def control_units(self):
        return [c for _, c, _ in self.pairs]

    @property
    def units(self):
        return self.treated_units + self.control_units

    @property
    def matched_fraction(self):
        total = len(self.pairs) + len(self.dropped_treated)
        return len(self.pairs) / total if total else 0.0

    def pairs_frame(self):
        return pd.DataFrame(self.pairs, columns=["treated_unit", "control_unit", "distance"])

    def to_dict(self):
        return {
            "n_pairs": len(self.pairs),
            "caliper_used": self.caliper_used,
            "matched_fraction": self.matched_fraction,
            "dropped_treated": [_plain(u) for u in self.dropped_treated],
            "n_dropped_controls": len(self.dropped_controls),
        }


def _plain(u):
    return u.item() if hasattr(u, "item") else u


def logit(p):
    p = np.asarray(p, float)
    return np.log(p) - np.log1p(-p)


def match_caliper(scores, treatment, caliper_multiplier=DEFAULT_CALIPER, unit_ids=None, scale="probability"):
    """Greedy 1:1 nearest-neighbour matching on the logit score.

    Treated units are processed in descending score (ties: lowest id); each
    takes the nearest still-unused control (ties: lowest id) if it lies
    within ``caliper_multiplier * SD(logit score)``. Pass ``scale="logit"``
    to supply linear predictors, which avoids saturation at extreme scores.
    """
    s = np.asarray(scores, float)
    d = np.asarray(treatment).astype(bool)
    ids = np.arange(len(s)) if unit_ids is None else np.asarray(unit_ids)
    if scale == "logit":
        lg = s
    elif scale == "probability":
        if np.any((s <= 0) | (s >= 1)):
            raise DataError("propensity scores must lie strictly inside (0, 1)")
        lg = logit(s)
    else:
        raise ValueError(f"unknown score scale {scale!r}")
    caliper = float(caliper_multiplier * lg.std(ddof=1)) if len(lg) > 1 else 0.0

    t_idx = np.flatnonzero(d)
    c_idx = np.flatnonzero(~d)
    t_order = t_idx[np.lexsort((ids[t_idx], -s[t_idx]))]
    c_order = c_idx[np.argsort(ids[c_idx], kind="stable")]
    c_logit = lg[c_order]
    free = np.ones(len(c_order), bool)
    pairs, dropped = [], []
    for i in t_order:
        if not free.any():
            dropped.append(_plain(ids[i]))
            continue
        dist = np.where(free, np.abs(c_logit - lg[i]), np.inf)
        j = int(np.argmin(dist))  # first minimum == lowest id, controls are id-sorted
        if dist[j] <= caliper:
            free[j] = False
            pairs.append((_plain(ids[i]), _plain(ids[c_order[j]]), float(dist[j])))
        else:
            dropped.append(_plain(ids[i]))
    unused = [_plain(ids[c]) for c in c_order[free]]
    return MatchedSet(pairs, dropped, unused, caliper)


def smd(x_t, x_c):
    """(mean_T - mean_C) / sqrt((var_T + var_C) / 2)."""
    x_t, x_c = np.asarray(x_t, float), np.asarray(x_c, float)
    if len(x_t) == 0 or len(x_c) == 0:
        return np.nan
    diff = x_t.mean() - x_c.mean()
    vt = x_t.var(ddof=1) if len(x_t) > 1 else 0.0
    vc = x_c.var(ddof=1) if len(x_c) > 1 else 0.0
    pooled = np.sqrt((vt + vc) / 2)
    if pooled == 0:
        return 0.0 if diff == 0 else np.copysign(np.inf, diff)
    return diff / pooled


def diff_in_means(mean_t, sd_t, n_t, mean_c, sd_c, n_c):
    """Control-minus-treated difference and its standard error."""
    return mean_c - mean_t, float(np.sqrt(sd_t**2 / n_t + sd_c**2 / n_c))


@dataclass
class BalanceReport:
    rows: pd.DataFrame
    n_treated_before: int
    n_control_before: int
    n_treated_after: int
    n_control_after: int
    threshold: float = SMD_THRESHOLD
    flagged: list = field(default_factory=list)

    @property
    def balanced(self):
        return not self.flagged

    def to_dict(self):
        def clean(v):
            v = float(v)
            return v if np.isfinite(v) else ("inf" if v > 0 else "-inf") if not np.isnan(v) else None

        return {
            "threshold": self.threshold,
            "n_treated_before": self.n_treated_before,
            "n_control_before": self.n_control_before,
            "n_treated_after": self.n_treated_after,
            "n_control_after": self.n_control_after,
            "flagged": self.flagged,
            "covariates": {
                name: {k: clean(v) for k, v in row.items()} for name, row in self.rows.iterrows()
            },
        }


def balance_report(baseline, treatment, matched, covariates, threshold=SMD_THRESHOLD):
    """Balance before and after matching.

    ``baseline`` is indexed by unit id (one row per unit at event time -1)
    and ``treatment`` is a per-unit flag aligned with it.
    """
    d = np.asarray(treatment).astype(bool)
    t_units = matched.treated_units
    c_units = matched.control_units
    after_t = baseline.loc[t_units]
    after_c = baseline.loc[c_units]
    rows = {}
    for cov in covariates:
        x = baseline[cov].to_numpy(float)
        xt, xc = x[d], x[~d]
        dm, se = diff_in_means(xt.mean(), xt.std(ddof=1), len(xt), xc.mean(), xc.std(ddof=1), len(xc))
        at, ac = after_t[cov].to_numpy(float), after_c[cov].to_numpy(float)
        rows[cov] = {
            "mean_treated_before": xt.mean(),
            "mean_control_before": xc.mean(),
            "diff_in_means_before": dm,
            "se_before": se,
            "smd_before": smd(xt, xc),
            "mean_treated_after": at.mean() if len(at) else np.nan,
            "mean_control_after": ac.mean() if len(ac) else np.nan,
            "smd_after": smd(at, ac),
        }
    frame = pd.DataFrame.from_dict(rows, orient="index")
    flagged = [c for c in covariates if not abs(frame.loc[c, "smd_after"]) < threshold]
    return BalanceReport(frame, int(d.sum()), int((~d).sum()), len(t_units), len(c_units), threshold, flagged)
