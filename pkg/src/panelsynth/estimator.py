"""Event-study regressions with unit-clustered inference.

The main specification regresses the outcome on treatment x event-time
dummies (event time -1 omitted) and optional time-varying covariates,
absorbing unit and event-time fixed effects by alternating demeaning.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from panelsynth.errors import (
    CollinearityError,
    DataError,
    InferenceError,
    LagError,
    NumericError,
    SingularMatrixError,
)
from panelsynth.panel import DEFAULT_WINDOW, event_times

logger = logging.getLogger(__name__)

DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 10_000
Z95 = 1.96
REFERENCE_TAU = -1


def term_name(tau):
    return f"treated_x_tau{tau:+d}"


@dataclass
class EventStudyResult:
    coefficients: pd.DataFrame
    gamma: pd.DataFrame
    vcov: np.ndarray
    names: list
    r2_within: float
    r2_overall: float
    r2_adj_within: float
    r2_adj_overall: float
    residuals: np.ndarray
    unit_of_row: np.ndarray
    n_obs: int
    n_clusters: int
    window: tuple
    reference: int = REFERENCE_TAU
    label: str = "twfe"

    @property
    def beta(self):
        return self.coefficients.set_index("tau")["estimate"]

    @property
    def pre_terms(self):
        return self.coefficients[self.coefficients["tau"] <= -2]

    def vcov_of(self, terms):
        idx = [self.names.index(t) for t in terms]
        return self.vcov[np.ix_(idx, idx)]

    def table(self):
        """Coefficient rows, event terms first, then covariates."""
        rows = self.coefficients[["term", "estimate", "se", "ci_low", "ci_high", "p_value"]]
        return pd.concat([rows, self.gamma[["term", "estimate", "se", "ci_low", "ci_high", "p_value"]]], ignore_index=True)


@dataclass
class DynamicOlsResult:
    coefficients: pd.DataFrame
    lag_coef: float
    lag_se: float
    vcov: np.ndarray
    names: list
    r2: float
    r2_adj: float
    n_obs: int
    n_clusters: int

    def table(self):
        return self.coefficients[["term", "estimate", "se", "ci_low", "ci_high", "p_value"]]


def group_codes(values):
    uniq, codes = np.unique(np.asarray(values), return_inverse=True)
    return codes, len(uniq)


def demean(x, groups, tol=DEMEAN_TOL, max_iter=DEMEAN_MAX_ITER):
    """Sweep out every grouping in turn until no cell moves by ``tol``.

    ``groups`` is a list of integer code arrays.
    """
    x = np.array(x, dtype=float, copy=True)
    one_d = x.ndim == 1
    if one_d:
        x = x[:, None]
    counts = [np.bincount(g) for g in groups]
    for it in range(max_iter):
        change = 0.0
        for g, cnt in zip(groups, counts):
            means = np.stack([np.bincount(g, weights=x[:, j], minlength=len(cnt)) for j in range(x.shape[1])], axis=1)
            means /= cnt[:, None]
            step = means[g]
            change = max(change, np.abs(step).max() if step.size else 0.0)
            x -= step
        if change < tol:
            break
    else:
        raise NumericError(f"alternating demeaning did not converge in {max_iter} sweeps")
    return x[:, 0] if one_d else x


def check_rank(x, names, scale=None, tol=1e-9):
    """Raise CollinearityError naming the first column in the span of earlier ones."""
    if x.shape[1] == 0:
        return
    scale = np.linalg.norm(x, axis=0) if scale is None else np.asarray(scale, float)
    for j in range(x.shape[1]):
        col = x[:, j]
        ref = max(scale[j], 1e-300)
        if j == 0:
            resid = col
        else:
            coef, *_ = np.linalg.lstsq(x[:, :j], col, rcond=None)
            resid = col - x[:, :j] @ coef
        if np.linalg.norm(resid) <= tol * max(ref, 1.0) or scale[j] == 0:
            raise CollinearityError(f"column {names[j]!r} is collinear after fixed effects", column=names[j])


def cluster_vcov(x, resid, clusters, k=None):
    """CR1 sandwich (X'X)^-1 (sum_g X_g' e_g e_g' X_g) (X'X)^-1.

    Scaled by G/(G-1) * (N-1)/(N-k); ``k`` defaults to the number of columns.
    """
    x = np.asarray(x, float)
    e = np.asarray(resid, float)
    n, p = x.shape
    k = p if k is None else k
    codes, g = group_codes(clusters)
    if g < 2:
        raise InferenceError(f"cluster-robust inference needs at least 2 clusters, got {g}")
    xtx = x.T @ x
    try:
        bread = np.linalg.inv(xtx)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("X'X is singular") from exc
    if not np.all(np.isfinite(bread)) or np.linalg.cond(xtx) > 1e14:
        raise SingularMatrixError("X'X is singular")
    scores = np.zeros((g, p))
    np.add.at(scores, codes, x * e[:, None])
    meat = scores.T @ scores
    factor = g / (g - 1) * (n - 1) / (n - k)
    v = factor * bread @ meat @ bread
    return (v + v.T) / 2


def _inference(beta, v):
    se = np.sqrt(np.clip(np.diag(v), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = beta / se
    p = 2 * stats.norm.sf(np.abs(z))
    return se, beta - Z95 * se, beta + Z95 * se, p


def _frame(names, taus, beta, v):
    se, lo, hi, p = _inference(beta, v)
    return pd.DataFrame(
        {"term": names, "tau": taus, "estimate": beta, "se": se, "ci_low": lo, "ci_high": hi, "p_value": p}
    )


def _sample_units(sample):
    if sample is None or (isinstance(sample, str) and sample == "all"):
        return None
    if hasattr(sample, "units"):
        return list(sample.units)
    return list(sample)


def _prepare(panel, sample, covariates, window):
    s = panel.schema
    df = panel.data
    units = _sample_units(sample)
    if units is not None:
        df = df[df[s.unit_id].isin(units)]
    lo, hi = window
    df = df[df[s.event_time].between(lo, hi)]
    need = [s.outcome] + list(covariates)
    df = df.dropna(subset=need)
    return df


def fit_event_study(panel, sample=None, covariates=(), window=DEFAULT_WINDOW, unit_effects=True, label="twfe"):
    """Estimate the dynamic two-way fixed-effects event study.

    ``sample`` is None (all units), a MatchedSet or a list of unit ids. With
    ``unit_effects=False`` only event-time effects are absorbed and a
    treatment level term is added instead.
    """
    s = panel.schema
    covariates = list(covariates)
    df = _prepare(panel, sample, covariates, window)
    if unit_effects:
        n_obs_unit = df.groupby(s.unit_id)[s.outcome].transform("size")
        single = (n_obs_unit < 2).to_numpy()
        if single.any():
            logger.info("dropping %d singleton unit(s)", int(df.loc[single, s.unit_id].nunique()))
            df = df[~single]
    if df.empty:
        raise DataError("no usable observations for the event study")
    taus = [t for t in event_times(window) if t != REFERENCE_TAU]
    tau = df[s.event_time].to_numpy()
    d = df[s.treatment].to_numpy(float)
    y = df[s.outcome].to_numpy(float)
    names = [term_name(t) for t in taus]
    cols = [d * (tau == t) for t in taus]
    if not unit_effects:
        names.append("treated")
        cols.append(d)
    names += covariates
    cols += [df[c].to_numpy(float) for c in covariates]
    x = np.column_stack(cols) if cols else np.empty((len(y), 0))

    unit_codes, n_units = group_codes(df[s.unit_id].to_numpy())
    time_codes, n_times = group_codes(tau)
    groups = [unit_codes, time_codes] if unit_effects else [time_codes]
    xd = demean(x, groups)
    yd = demean(y, groups)
    check_rank(xd, names, scale=np.maximum(np.linalg.norm(x, axis=0), 1.0))

    xtx = xd.T @ xd
    beta = np.linalg.solve(xtx, xd.T @ yd)
    resid = yd - xd @ beta
    n = len(y)
    k_fe = (n_times - 1) + (n_units if unit_effects else 1)
    v = cluster_vcov(xd, resid, unit_codes, k=x.shape[1] + (n_times if unit_effects else n_times))
    ssr = resid @ resid
    tss = ((y - y.mean()) ** 2).sum()
    tss_w = yd @ yd
    r2 = 1 - ssr / tss if tss > 0 else np.nan
    r2w = 1 - ssr / tss_w if tss_w > 0 else np.nan
    k_total = x.shape[1] + k_fe
    dof = n - k_total
    adj = lambda r: 1 - (1 - r) * (n - 1) / dof if dof > 0 else np.nan  # noqa: E731

    n_ev = len(taus)
    coef = _frame(names[:n_ev], taus, beta[:n_ev], v[:n_ev, :n_ev])
    rest = slice(n_ev, len(names))
    gamma = _frame(names[rest], [None] * (len(names) - n_ev), beta[rest], v[rest, rest])
    return EventStudyResult(
        coefficients=coef,
        gamma=gamma,
        vcov=v,
        names=names,
        r2_within=r2w,
        r2_overall=r2,
        r2_adj_within=adj(r2w),
        r2_adj_overall=adj(r2),
        residuals=resid,
        unit_of_row=df[s.unit_id].to_numpy(),
        n_obs=n,
        n_clusters=n_units,
        window=tuple(window),
        label=label,
    )


def fit_dynamic_ols(panel, covariates=(), window=DEFAULT_WINDOW, sample=None):
    """Pooled OLS with the previous wave's outcome as a regressor.

    No unit effects: intercept, event-time dummies, a treatment level term,
    treatment x event-time dummies (event time -1 omitted) and covariates.
    A row is usable only if the unit was also observed at tau - 1.
    """
    s = panel.schema
    covariates = list(covariates)
    df = _prepare(panel, sample, covariates, window).sort_values([s.unit_id, s.event_time])
    prev = df[[s.unit_id, s.event_time, s.outcome]].copy()
    prev[s.event_time] = prev[s.event_time] + 1
    prev = prev.rename(columns={s.outcome: "_lag"})
    df = df.merge(prev, on=[s.unit_id, s.event_time], how="inner")
    if df.empty:
        raise LagError("no unit is observed on consecutive waves")
    tau = df[s.event_time].to_numpy()
    present = sorted(set(tau.tolist()))
    d = df[s.treatment].to_numpy(float)
    taus = [t for t in present if t != REFERENCE_TAU]
    names = ["intercept", "lagged_outcome", "treated"]
    cols = [np.ones(len(df)), df["_lag"].to_numpy(float), d]
    base = present[0]
    for t in present:
        if t != base:
            names.append(f"tau{t:+d}")
            cols.append((tau == t).astype(float))
    names += [term_name(t) for t in taus]
    cols += [d * (tau == t) for t in taus]
    names += covariates
    cols += [df[c].to_numpy(float) for c in covariates]
    x = np.column_stack(cols)
    y = df[s.outcome].to_numpy(float)
    centred = x - np.where(np.arange(x.shape[1]) == 0, 0.0, x.mean(axis=0))
    check_rank(centred, names, scale=np.maximum(np.linalg.norm(x, axis=0), 1.0))
    beta = np.linalg.solve(x.T @ x, x.T @ y)
    resid = y - x @ beta
    v = cluster_vcov(x, resid, df[s.unit_id].to_numpy())
    n = len(y)
    r2 = 1 - (resid @ resid) / ((y - y.mean()) ** 2).sum()
    r2_adj = 1 - (1 - r2) * (n - 1) / (n - x.shape[1])
    ev = [names.index(term_name(t)) for t in taus]
    coef = _frame([names[i] for i in ev], taus, beta[ev], v[np.ix_(ev, ev)])
    lag_i = names.index("lagged_outcome")
    return DynamicOlsResult(
        coefficients=coef,
        lag_coef=float(beta[lag_i]),
        lag_se=float(np.sqrt(v[lag_i, lag_i])),
        vcov=v,
        names=names,
        r2=r2,
        r2_adj=r2_adj,
        n_obs=n,
        n_clusters=len(np.unique(df[s.unit_id])),
    )


@dataclass
class WaldTest:
    statistic: float
    dof: int
    p_value: float
    terms: list = field(default_factory=list)


def pretrend_joint_test(result):
    """Wald test that every pre-period coefficient (tau <= -2) is zero."""
    pre = result.pre_terms
    if pre.empty:
        raise DataError("no pre-period coefficients to test")
    b = pre["estimate"].to_numpy()
    v = result.vcov_of(list(pre["term"]))
    if np.linalg.matrix_rank(v) < len(b) or np.linalg.cond(v) > 1e14:
        raise SingularMatrixError("pre-period covariance block is singular")
    w = float(b @ np.linalg.solve(v, b))
    return WaldTest(w, len(b), float(stats.chi2.sf(w, len(b))), list(pre["term"]))


COEF_COLUMNS = ["term", "estimate", "se", "ci_low", "ci_high", "p_value"]


def coefficients_frame(results):
    """Long coefficient table, one block per labelled specification."""
    frames = []
    for label, res in results.items():
        t = res.table().copy()
        t.insert(0, "model", label)
        frames.append(t)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["model"] + COEF_COLUMNS)


def event_plot_frame(result):
    """Per-tau point estimates and CI bounds; the reference period has no row."""
    c = result.coefficients[["tau", "estimate", "ci_low", "ci_high"]].copy()
    return c.sort_values("tau").reset_index(drop=True)
