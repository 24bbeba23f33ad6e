"""Mode-specific normalization of wide tables.

Each numeric column is modelled by a one-dimensional Gaussian mixture fitted
with EM. A value ``x`` assigned to mode ``k`` is represented by the scalar
``alpha = (x - mu_k) / (4 sigma_k)`` (clipped to [-1, 1]) followed by a one-hot
mode indicator. Categorical and binary columns become plain one-hot blocks.
Trajectory columns get one extra trailing "unobserved" state that stands in
for the padding sentinel.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from panelsynth.errors import DataError, FitError

logger = logging.getLogger(__name__)

MAX_MODES = 10
PRUNE_WEIGHT = 0.005
EM_MAX_ITER = 100
EM_TOL = 1e-6
SIGMA_FLOOR = 1e-4
ALPHA_SCALE = 4.0


class EncodeError(DataError):
    pass


@dataclass
class ModeModel:
    column: str
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def n_modes(self):
        return len(self.means)

    def log_density(self, x):
        """Per-mode weighted log densities, shape (n, n_modes)."""
        x = np.asarray(x, float)[:, None]
        z = (x - self.means[None]) / self.stds[None]
        return np.log(self.weights)[None] - 0.5 * z**2 - np.log(self.stds)[None] - 0.5 * np.log(2 * np.pi)

    def responsibilities(self, x):
        ld = self.log_density(x)
        ld -= ld.max(axis=1, keepdims=True)
        p = np.exp(ld)
        return p / p.sum(axis=1, keepdims=True)

    def to_dict(self):
        return {
            "column": self.column,
            "weights": [float(w) for w in self.weights],
            "means": [float(m) for m in self.means],
            "stds": [float(s) for s in self.stds],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["column"], np.asarray(d["weights"], float), np.asarray(d["means"], float), np.asarray(d["stds"], float))


def _kmeanspp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.asarray(centers)[None]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            break
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.sort(np.asarray(centers))


def _mixture_loglik(x, w, mu, sd):
    z = (x[:, None] - mu[None]) / sd[None]
    ld = np.log(np.maximum(w, 1e-300))[None] - 0.5 * z**2 - np.log(sd)[None] - 0.5 * np.log(2 * np.pi)
    m = ld.max(axis=1, keepdims=True)
    return ld, (m[:, 0] + np.log(np.exp(ld - m).sum(axis=1)))


def em_fit(x, k, floor, seed=0, max_iter=EM_MAX_ITER, tol=EM_TOL):
    """Plain EM for a k-component 1-D mixture.

    Returns ``(weights, means, stds, trace)`` where ``trace`` is the mean
    log-likelihood after initialization and after every iteration. Raises
    ``AssertionError`` if the likelihood ever decreases.
    """
    rng = np.random.default_rng(seed)
    n = len(x)
    mu = _kmeanspp(x, k, rng)
    k = len(mu)
    sd = np.full(k, max(x.std(), floor))
    w = np.full(k, 1.0 / k)
    ld, ll = _mixture_loglik(x, w, mu, sd)
    trace = [ll.mean()]
    for _ in range(max_iter):
        resp = np.exp(ld - ll[:, None])
        nk = resp.sum(axis=0)
        live = nk > 1e-12
        w = nk / n
        mu = np.where(live, (resp * x[:, None]).sum(axis=0) / np.where(live, nk, 1.0), mu)
        var = (resp * (x[:, None] - mu[None]) ** 2).sum(axis=0) / np.where(live, nk, 1.0)
        sd = np.maximum(np.sqrt(var), floor)
        ld, ll = _mixture_loglik(x, w, mu, sd)
        cur = ll.mean()
        assert cur >= trace[-1] - 1e-9 * max(1.0, abs(trace[-1])), (
            f"EM log-likelihood decreased: {trace[-1]} -> {cur}"
        )
        trace.append(cur)
        if cur - trace[-2] < tol:
            break
    return w, mu, sd, trace


def fit_modes(column_values, max_modes=MAX_MODES, seed=0, column="", prune=PRUNE_WEIGHT):
    """Fit a Gaussian mixture to one column.

    The number of components is chosen by BIC over 1..max_modes; components
    lighter than ``prune`` are then removed and weights renormalised. Modes
    are returned sorted by mean.
    """
    x = np.asarray(column_values, float)
    x = x[np.isfinite(x)]
    if len(x) == 0:
        raise FitError(f"column {column!r}: no finite values to fit")
    if max_modes < 1:
        raise FitError("max_modes must be >= 1")
    span = float(x.max() - x.min())
    floor = SIGMA_FLOOR * (span if span > 0 else 1.0)
    if span == 0 or len(x) < 2:
        return ModeModel(column, np.ones(1), np.array([x[0]]), np.array([floor]), [])

    n_unique = len(np.unique(x))
    best = None
    for k in range(1, min(max_modes, n_unique) + 1):
        w, mu, sd, trace = em_fit(x, k, floor, seed=seed + k)
        bic = -2 * trace[-1] * len(x) + (3 * len(mu) - 1) * np.log(len(x))
        if best is None or bic < best[0]:
            best = (bic, w, mu, sd, trace)
    _, w, mu, sd, trace = best
    keep = w >= prune
    if not keep.any():
        keep = w == w.max()
    w, mu, sd = w[keep] / w[keep].sum(), mu[keep], sd[keep]
    order = np.argsort(mu, kind="stable")
    return ModeModel(column, w[order], mu[order], sd[order], trace)


@dataclass(frozen=True)
class ColumnLayout:
    name: str
    kind: str  # "numeric" or "discrete"
    start: int
    width: int
    has_unobserved: bool
    sentinel: float = np.nan
    categories: tuple = ()

    @property
    def stop(self):
        return self.start + self.width

    @property
    def block(self):
        """Slice of the one-hot block (excludes alpha)."""
        s = self.start + (1 if self.kind == "numeric" else 0)
        return slice(s, self.stop)


@dataclass
class TableEncoder:
    """Fitted per-column encoders for one wide layout."""

    mode_models: dict
    categories: dict
    layout: list
    n_skeleton: int

    @property
    def width(self):
        return self.layout[-1].stop if self.layout else 0

    @property
    def skeleton_width(self):
        return self.layout[self.n_skeleton].start if self.n_skeleton < len(self.layout) else self.width

    def to_dict(self):
        return {
            "mode_models": {k: m.to_dict() for k, m in self.mode_models.items()},
            "categories": {k: list(v) for k, v in self.categories.items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class EncodedMatrix:
    values: np.ndarray
    layout: list
    n_skeleton: int
    unit_ids: np.ndarray = None


def _variable_key(wide, j):
    """Mode models are shared across waves of a dynamic variable."""
    spec = wide.column_spec(j)
    return spec.name


def fit_encoder(wide, max_modes=MAX_MODES, seed=0):
    """Fit mode models and category sets on a real wide table."""
    obs = wide.observed_mask()
    pooled = {}
    kinds = {}
    for j in range(wide.width):
        key = _variable_key(wide, j)
        pooled.setdefault(key, []).append(wide.values[obs[:, j], j])
        kinds[key] = wide.column_spec(j)
    mode_models, categories = {}, {}
    for i, (key, chunks) in enumerate(pooled.items()):
        vals = np.concatenate(chunks)
        spec = kinds[key]
        if spec.numeric:
            mode_models[key] = fit_modes(vals, max_modes=max_modes, seed=seed + 1000 * i, column=key)
        else:
            cats = spec.categories if spec.categories is not None else tuple(np.unique(vals))
            categories[key] = tuple(float(c) for c in cats)
    return build_encoder(wide, mode_models, categories)


def build_encoder(wide, mode_models, categories):
    layout = []
    start = 0
    for j in range(wide.width):
        key = _variable_key(wide, j)
        traj = j >= wide.n_skeleton
        sentinel = wide.sentinels[j] if traj else np.nan
        if key in mode_models:
            width = 1 + mode_models[key].n_modes + int(traj)
            layout.append(ColumnLayout(wide.columns[j], "numeric", start, width, traj, sentinel))
        else:
            cats = categories[key]
            width = len(cats) + int(traj)
            layout.append(ColumnLayout(wide.columns[j], "discrete", start, width, traj, sentinel, cats))
        start += width
    return TableEncoder(mode_models, categories, layout, wide.n_skeleton)


def encode_value(x, model, k):
    """alpha for value ``x`` under mode ``k``."""
    return np.clip((x - model.means[k]) / (ALPHA_SCALE * model.stds[k]), -1.0, 1.0)


def decode_value(alpha, model, k):
    return alpha * ALPHA_SCALE * model.stds[k] + model.means[k]


def encode(wide, encoder, seed=0, columns=None, sample_modes=True, force_mode=None):
    """Encode a wide table.

    ``columns`` restricts encoding to a range of wide columns (used to encode
    only the skeleton). With ``sample_modes`` the mode of each numeric cell is
    drawn in proportion to its posterior responsibility; otherwise the most
    responsible mode is used. ``force_mode`` (tests only) pins every numeric
    cell to one mode index.
    """
    rng = np.random.default_rng(seed)
    cols = range(wide.width) if columns is None else columns
    lays = [encoder.layout[j] for j in cols]
    offset = lays[0].start if lays else 0
    out = np.zeros((wide.n_rows, (lays[-1].stop - offset) if lays else 0))
    obs = wide.observed_mask()
    for j, lay in zip(cols, lays):
        x = wide.values[:, j]
        seen = obs[:, j]
        if not lay.has_unobserved and not seen.all():
            raise EncodeError(f"column {lay.name!r} has missing values and no unobserved state")
        s = lay.start - offset
        if lay.kind == "numeric":
            model = encoder.mode_models[_variable_key(wide, j)]
            xs = x[seen]
            if force_mode is not None:
                k = np.full(len(xs), force_mode)
            elif sample_modes:
                resp = model.responsibilities(xs)
                u = rng.random(len(xs))[:, None]
                k = np.minimum((u > np.cumsum(resp, axis=1)).sum(axis=1), model.n_modes - 1)
            else:
                k = model.responsibilities(xs).argmax(axis=1) if len(xs) else np.zeros(0, int)
            rows = np.flatnonzero(seen)
            out[rows, s] = encode_value(xs, model, k)
            out[rows, s + 1 + k] = 1.0
            if lay.has_unobserved:
                out[~seen, lay.stop - offset - 1] = 1.0
        else:
            cats = np.asarray(lay.categories)
            xs = x[seen]
            idx = np.searchsorted(cats, xs)
            idx_c = np.clip(idx, 0, len(cats) - 1)
            bad = cats[idx_c] != xs
            if bad.any():
                raise EncodeError(f"value {xs[bad][0]!r} is not a known category of {lay.name!r}")
            rows = np.flatnonzero(seen)
            out[rows, s + idx_c] = 1.0
            if lay.has_unobserved:
                out[~seen, lay.stop - offset - 1] = 1.0
    return EncodedMatrix(out, lays, wide.n_skeleton, wide.unit_ids)


def decode(encoded, encoder, template):
    """Invert :func:`encode` into a wide table shaped like ``template``.

    Block indicators are read by argmax, ties going to the lowest index; the
    trailing unobserved state decodes to the column's sentinel.
    """
    v = encoded.values
    lays = encoded.layout
    offset = lays[0].start if lays else 0
    cols = [template.columns.index(lay.name) for lay in lays]
    out = np.empty((v.shape[0], len(lays)))
    for c, (j, lay) in enumerate(zip(cols, lays)):
        s = lay.start - offset
        block = v[:, lay.block.start - offset : lay.stop - offset]
        k = block.argmax(axis=1)
        unobs = (k == block.shape[1] - 1) if lay.has_unobserved else np.zeros(len(k), bool)
        if lay.kind == "numeric":
            model = encoder.mode_models[_variable_key(template, j)]
            kk = np.minimum(k, model.n_modes - 1)
            vals = decode_value(np.clip(v[:, s], -1, 1), model, kk)
        else:
            cats = np.asarray(lay.categories)
            vals = cats[np.minimum(k, len(cats) - 1)]
        out[:, c] = np.where(unobs, lay.sentinel, vals)
    if len(cols) == template.width:
        return template.replace(values=out, unit_ids=encoded.unit_ids if encoded.unit_ids is not None else template.unit_ids)
    return out


def mode_models_to_json(mode_models):
    return json.dumps({k: m.to_dict() for k, m in mode_models.items()}, indent=2, sort_keys=True)


def mode_models_from_json(text):
    return {k: ModeModel.from_dict(d) for k, d in json.loads(text).items()}
