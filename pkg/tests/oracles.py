"""Independent reference implementations used as test oracles.

Each routine is deliberately naive (explicit design matrices, Python loops,
exact rational arithmetic) and shares no code with the package.
"""

import math
from fractions import Fraction

import numpy as np


def dummy_ols(y, treated, tau, unit, event_taus, covariates=None, reference=-1):
    """Full dummy-variable OLS via explicit normal equations.

    Returns coefficients of the treated x tau interactions (in ``event_taus``
    order, reference excluded) followed by covariate coefficients.
    """
    y = np.asarray(y, float)
    units = sorted(set(unit))
    times = sorted(set(tau))
    cols = []
    for t in event_taus:
        if t != reference:
            cols.append([float(d == 1 and tt == t) for d, tt in zip(treated, tau)])
    if covariates is not None:
        for c in np.asarray(covariates, float).reshape(len(y), -1).T:
            cols.append(list(c))
    n_main = len(cols)
    for u in units:
        cols.append([float(uu == u) for uu in unit])
    for t in times[1:]:
        cols.append([float(tt == t) for tt in tau])
    x = np.array(cols).T
    beta = np.linalg.solve(x.T @ x, x.T @ y)
    return beta[:n_main]


def sandwich(x, e, clusters, k):
    """CR1 cluster-robust covariance with explicit per-cluster loops."""
    x = np.asarray(x, float)
    e = np.asarray(e, float)
    n, p = x.shape
    labels = sorted(set(clusters))
    meat = np.zeros((p, p))
    for g in labels:
        rows = [i for i in range(n) if clusters[i] == g]
        s = np.zeros(p)
        for i in rows:
            s += x[i] * e[i]
        meat += np.outer(s, s)
    bread = np.linalg.pinv(x.T @ x)
    g = len(labels)
    return g / (g - 1) * (n - 1) / (n - k) * bread @ meat @ bread


def hc1(x, e, k):
    """Heteroskedasticity-robust covariance, scaled n/(n-1) * (n-1)/(n-k)."""
    x = np.asarray(x, float)
    n, p = x.shape
    meat = sum(e[i] ** 2 * np.outer(x[i], x[i]) for i in range(n))
    bread = np.linalg.pinv(x.T @ x)
    return n / (n - 1) * (n - 1) / (n - k) * bread @ meat @ bread


def ks_brute(a, b):
    """Two-sample KS statistic by evaluating both ECDFs at every data point."""
    a, b = list(a), list(b)
    best = 0.0
    for v in a + b:
        fa = sum(1 for x in a if x <= v) / len(a)
        fb = sum(1 for x in b if x <= v) / len(b)
        best = max(best, abs(fa - fb))
    return best


def pearson(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    sab = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = sum((x - ma) ** 2 for x in a)
    sbb = sum((y - mb) ** 2 for y in b)
    return sab / math.sqrt(saa * sbb)


def ls_slope(t, y):
    n = len(t)
    mt = sum(t) / n
    my = sum(y) / n
    return sum((a - mt) * (b - my) for a, b in zip(t, y)) / sum((a - mt) ** 2 for a in t)


def chi2_sf_1(w):
    """Upper tail of chi-square with one degree of freedom."""
    return math.erfc(math.sqrt(w / 2.0))


def oster_exact(beta_tilde, r_tilde, beta_dot, r_dot, factor):
    """beta* and delta in exact rational arithmetic."""
    bt, rt, bd, rd, f = (Fraction(str(v)) for v in (beta_tilde, r_tilde, beta_dot, r_dot, factor))
    rmax = min(f * rt, Fraction(1))
    star = bt - (bd - bt) * (rmax - rt) / (rt - rd)
    delta = bt * (rt - rd) / ((bd - bt) * (rmax - rt))
    return float(star), float(delta), float(rmax)


def grid_em(x, n_grid=15, iters=300):
    """Two-component mixture MLE: EM from every pair of grid quantiles, best kept."""
    x = np.asarray(x, float)
    qs = np.quantile(x, np.linspace(0.05, 0.95, n_grid))
    best = None
    for i in range(n_grid):
        for j in range(i + 1, n_grid):
            mu = np.array([qs[i], qs[j]])
            sd = np.array([x.std(), x.std()])
            w = np.array([0.5, 0.5])
            for _ in range(iters):
                dens = np.stack(
                    [w[k] * np.exp(-0.5 * ((x - mu[k]) / sd[k]) ** 2) / (sd[k] * math.sqrt(2 * math.pi)) for k in range(2)],
                    axis=1,
                )
                tot = dens.sum(axis=1, keepdims=True)
                r = dens / tot
                nk = r.sum(axis=0)
                w = nk / len(x)
                mu = (r * x[:, None]).sum(axis=0) / nk
                sd = np.sqrt((r * (x[:, None] - mu) ** 2).sum(axis=0) / nk)
            ll = np.log(tot).sum()
            if best is None or ll > best[0]:
                best = (ll, np.sort(mu))
    return best[1]


def gd_logistic(x, y, lr=0.5, iters=5000):
    """Logistic regression on standardized covariates by plain gradient descent."""
    x = np.asarray(x, float)
    z = (x - x.mean(axis=0)) / x.std(axis=0)
    design = np.column_stack([np.ones(len(y)), z])
    beta = np.zeros(design.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-design @ beta))
        beta += lr * design.T @ (y - p) / len(y)
    return beta


def greedy_match(logits, treated, ids, caliper):
    """Greedy 1:1 matching written as plain loops over Python lists."""
    t = [(logits[i], ids[i]) for i in range(len(ids)) if treated[i]]
    c = sorted((ids[i], logits[i]) for i in range(len(ids)) if not treated[i])
    t.sort(key=lambda r: (-r[0], r[1]))
    used = set()
    pairs = []
    for lt, tid in t:
        best = None
        for cid, lc in c:
            if cid in used:
                continue
            dist = abs(lc - lt)
            if best is None or dist < best[0]:
                best = (dist, cid)
        if best is not None and best[0] <= caliper:
            used.add(best[1])
            pairs.append((tid, best[1]))
    return pairs
