"""Real-versus-synthetic fidelity metrics.

Every distributional metric sees only observed cells: padding sentinels and
NaN are dropped column by column before comparison.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedGroupKFold
from sklearn.preprocessing import StandardScaler

from panelsynth.errors import DataError, FoldError, MetricError, PanelSynthError
from panelsynth.panel import DEFAULT_WINDOW, WideTable, to_wide

logger = logging.getLogger(__name__)

METRIC_VERSION = (
    "panelsynth-fidelity/1: ks=mean(1-D) with TVD for categorical; "
    "mape=mean |dmean|/|mean_real|; corr_diff=sum over upper-triangle pairs |drho|; "
    "adv=k-fold logistic accuracy; pretrend=1/(1+mean arm pre-slope gap)"
)
ZERO_MEAN = 1e-12


def _column_data(table, categorical=()):
    """Yield (name, is_numeric, observed values) for every column."""
    if isinstance(table, WideTable):
        mask = table.observed_mask()
        for j, name in enumerate(table.columns):
            spec = table.column_spec(j)
            yield name, spec.numeric, table.values[mask[:, j], j]
    else:
        for name in table.columns:
            col = pd.to_numeric(table[name], errors="coerce").to_numpy(float)
            yield name, name not in categorical, col[~np.isnan(col)]


def _pairs(real, synth, categorical=()):
    r = list(_column_data(real, categorical))
    s = list(_column_data(synth, categorical))
    if [c[0] for c in r] != [c[0] for c in s]:
        raise DataError("real and synthetic tables have different columns")
    return [(name, num, x, y) for (name, num, x), (_, _, y) in zip(r, s)]


def tvd(x, y):
    cats = np.union1d(x, y)
    p = np.array([(x == c).mean() for c in cats])
    q = np.array([(y == c).mean() for c in cats])
    return 0.5 * np.abs(p - q).sum()


def ks_details(real, synth, categorical=()):
    per_col = {}
    for name, numeric, x, y in _pairs(real, synth, categorical):
        if len(x) == 0 or len(y) == 0:
            logger.warning("ks_score: column %s has no observed cells; skipped", name)
            continue
        d = stats.ks_2samp(x, y).statistic if numeric else tvd(x, y)
        per_col[name] = 1.0 - float(d)
    if not per_col:
        raise DataError("ks_score: no comparable columns")
    return float(np.mean(list(per_col.values()))), per_col


def ks_score(real, synth, categorical=()):
    """Mean over columns of 1 - D (KS statistic, or TVD for categorical)."""
    return ks_details(real, synth, categorical)[0]


def mape_details(real, synth, categorical=()):
    per_col, flagged = {}, []
    for name, numeric, x, y in _pairs(real, synth, categorical):
        if not numeric or len(x) == 0 or len(y) == 0:
            continue
        mr, ms = x.mean(), y.mean()
        if abs(mr) > ZERO_MEAN:
            per_col[name] = abs(ms - mr) / abs(mr)
        else:
            span = x.max() - x.min()
            per_col[name] = abs(ms - mr) / span if span > 0 else abs(ms - mr)
            flagged.append(name)
    if not per_col:
        raise DataError("stat_mape: no numeric columns")
    return float(np.mean(list(per_col.values()))), per_col, flagged


def stat_mape(real, synth, categorical=()):
    """Mean relative error of column means; zero-mean columns use the real range."""
    return mape_details(real, synth, categorical)[0]


def _numeric_frame(table, categorical=()):
    if isinstance(table, WideTable):
        mask = table.observed_mask()
        vals = np.where(mask, table.values, np.nan)
        keep = [j for j in range(table.width) if table.column_spec(j).numeric]
        return pd.DataFrame(vals[:, keep], columns=[table.columns[j] for j in keep])
    cols = [c for c in table.columns if c not in categorical]
    return table[cols].apply(pd.to_numeric, errors="coerce").astype(float)


def corr_details(real, synth, categorical=()):
    r = _numeric_frame(real, categorical)
    s = _numeric_frame(synth, categorical)
    if list(r.columns) != list(s.columns):
        raise DataError("real and synthetic tables have different columns")
    if r.shape[1] < 2:
        raise DataError("corr_diff needs at least two numeric columns")
    cr, cs = r.corr(), s.corr()
    names = list(r.columns)
    flagged = [c for c in names if r[c].nunique() <= 1 or s[c].nunique() <= 1]
    total = 0.0
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = cr.iat[i, j], cs.iat[i, j]
            # undefined correlations (constant columns) contribute nothing
            if not (np.isnan(a) or np.isnan(b)):
                total += abs(a - b)
    return float(total), flagged


def corr_diff(real, synth, categorical=()):
    """Sum over column pairs of the absolute Pearson correlation gap."""
    return corr_details(real, synth, categorical)[0]


def _feature_matrix(table):
    if isinstance(table, WideTable):
        mask = table.observed_mask()
        vals = np.where(mask, table.values, np.nan)
        return vals, ~mask
    vals = table.apply(pd.to_numeric, errors="coerce").to_numpy(float)
    return vals, np.isnan(vals)


def adversarial_accuracy(real, synth, folds=5, seed=0):
    """Mean held-out accuracy of a logistic real-vs-synthetic classifier."""
    xr, mr = _feature_matrix(real)
    xs, ms = _feature_matrix(synth)
    n = min(len(xr), len(xs))
    if n == 0:
        raise DataError("adversarial_accuracy needs non-empty tables")
    if n < folds:
        raise FoldError(f"{n} rows per class is fewer than {folds} folds")
    rng = np.random.default_rng(seed)
    ir = np.sort(rng.choice(len(xr), n, replace=False))
    is_ = np.sort(rng.choice(len(xs), n, replace=False))
    x = np.vstack([xr[ir], xs[is_]])
    miss = np.vstack([mr[ir], ms[is_]])
    y = np.r_[np.zeros(n), np.ones(n)]
    fill = np.nanmean(np.where(miss, np.nan, x), axis=0)
    fill = np.where(np.isnan(fill), 0.0, fill)
    x = np.where(miss, fill, x)
    informative = miss.any(axis=0) & ~miss.all(axis=0)
    feats = np.hstack([x, miss[:, informative].astype(float)])
    # identical rows share a fold so a duplicate never sits on both sides of a split
    _, groups = np.unique(feats, axis=0, return_inverse=True)
    accs = []
    splitter = StratifiedGroupKFold(n_splits=folds, shuffle=True, random_state=seed)
    for train_idx, test_idx in splitter.split(feats, y, groups.ravel()):
        scaler = StandardScaler().fit(feats[train_idx])
        clf = LogisticRegression(max_iter=1000)
        clf.fit(scaler.transform(feats[train_idx]), y[train_idx])
        accs.append(clf.score(scaler.transform(feats[test_idx]), y[test_idx]))
    return float(np.mean(accs))


def _pre_slopes(panel, window):
    s = panel.schema
    lo = window[0]
    df = panel.data
    df = df[df[s.event_time].between(lo, -1)].dropna(subset=[s.outcome])
    out = {}
    for arm, g in df.groupby(s.treatment):
        means = g.groupby(s.event_time)[s.outcome].mean()
        if len(means) >= 2:
            out[int(arm)] = float(np.polyfit(means.index.to_numpy(float), means.to_numpy(), 1)[0])
    return out


def pretrend_details(real_long, synth_long, window=DEFAULT_WINDOW):
    real = _pre_slopes(real_long, window)
    synth = _pre_slopes(synth_long, window)
    gaps = {}
    for arm in (0, 1):
        if arm in real and arm in synth:
            gaps[arm] = abs(real[arm] - synth[arm])
        else:
            logger.warning("pretrend_preservation: arm %d lacks pre-periods; skipped", arm)
    if not gaps:
        raise DataError("pretrend_preservation: no arm has two pre-periods in both panels")
    return 1.0 / (1.0 + float(np.mean(list(gaps.values())))), {"real": real, "synth": synth, "gaps": gaps}


def pretrend_preservation(real_long, synth_long, window=DEFAULT_WINDOW):
    """1 / (1 + mean over arms of the gap in pre-period cohort-mean slopes)."""
    return pretrend_details(real_long, synth_long, window)[0]


@dataclass
class FidelityConfig:
    folds: int = 5
    seed: int = 0
    window: tuple = DEFAULT_WINDOW


@dataclass
class FidelityReport:
    ks_score: float
    mape: float
    corr_diff: float
    adversarial_accuracy: float
    pretrend_preservation: float
    per_column: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    version: str = METRIC_VERSION
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _json_keys(d):
    return {str(k): v for k, v in d.items()}


def evaluate_all(real_long, synth_long, config=None):
    """All five metrics on two long panels sharing a schema."""
    config = config or FidelityConfig()
    window = tuple(config.window)
    failures = {}
    results = {}
    wide = {}
    for tag, panel in (("real", real_long), ("synth", synth_long)):
        try:
            if panel.data.empty:
                raise DataError(f"{tag} panel is empty")
            wide[tag] = to_wide(panel, window)
        except PanelSynthError as exc:
            failures[f"{tag}_layout"] = str(exc)

    def attempt(name, fn):
        try:
            results[name] = fn()
        except (PanelSynthError, ValueError, KeyError) as exc:
            failures[name] = f"{type(exc).__name__}: {exc}"

    if len(wide) == 2:
        r, s = wide["real"], wide["synth"]
        attempt("ks_score", lambda: ks_details(r, s))
        attempt("mape", lambda: mape_details(r, s))
        attempt("corr_diff", lambda: corr_details(r, s))
        attempt("adversarial_accuracy", lambda: adversarial_accuracy(r, s, config.folds, config.seed))
    else:
        for name in ("ks_score", "mape", "corr_diff", "adversarial_accuracy"):
            failures[name] = "no wide layout"
    attempt("pretrend_preservation", lambda: pretrend_details(real_long, synth_long, window))
    if failures:
        raise MetricError(f"fidelity metrics failed: {sorted(failures)}", failures=failures)
    ks, ks_cols = results["ks_score"]
    mape, mape_cols, mape_flags = results["mape"]
    cd, cd_flags = results["corr_diff"]
    pt, pt_detail = results["pretrend_preservation"]
    return FidelityReport(
        ks_score=ks,
        mape=mape,
        corr_diff=cd,
        adversarial_accuracy=results["adversarial_accuracy"],
        pretrend_preservation=pt,
        per_column={"ks": ks_cols, "mape": mape_cols},
        flags={
            "mape_zero_mean": mape_flags,
            "corr_constant": cd_flags,
            "pretrend": {k: _json_keys(v) for k, v in pt_detail.items()},
        },
        seed=config.seed,
    )
