"""Panel schema, ingestion and the long/wide reshapes.

A :class:`LongPanel` holds one row per (unit, event time). A
:class:`WideTable` holds one row per unit laid out as

    [ skeleton block | trajectory block ]

where the skeleton block carries the static covariates, the treatment flag and
a baseline copy of every anchored dynamic variable (the outcome and every
variable with an evolution rule), all read at event time -1, and the trajectory
block carries each dynamic variable at each event time of the window,
variable-major. Unobserved trajectory cells hold a per-column padding sentinel
that lies strictly below the column's support.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from panelsynth.errors import (
    AlignmentError,
    BaselineError,
    IntegrityError,
    LayoutError,
    ParseError,
    SchemaError,
)

logger = logging.getLogger(__name__)

ROLES = ("static", "dynamic")
KINDS = ("continuous", "ordinal", "categorical", "binary")
SYNTHETIC_FLAG = "synthetic"
DEFAULT_WINDOW = (-3, 2)


@dataclass(frozen=True)
class VariableSpec:
    name: str
    role: str
    kind: str
    bounds: Optional[tuple] = None
    evolution_rule: Optional[float] = None
    round_to_integer: bool = False
    categories: Optional[tuple] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"{self.name}: role must be one of {ROLES}, got {self.role!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.bounds is not None:
            lo, hi = (float(b) for b in self.bounds)
            if not lo <= hi:
                raise SchemaError(f"{self.name}: bounds min {lo} exceeds max {hi}")
            object.__setattr__(self, "bounds", (lo, hi))
        if self.evolution_rule is not None:
            if self.role != "dynamic" or self.kind not in ("continuous", "ordinal"):
                raise SchemaError(
                    f"{self.name}: evolution_rule requires a dynamic continuous/ordinal variable"
                )
            object.__setattr__(self, "evolution_rule", float(self.evolution_rule))
        if self.kind == "ordinal" and self.round_to_integer and self.bounds is not None:
            if any(b != np.floor(b) for b in self.bounds):
                raise SchemaError(f"{self.name}: integer-rounded ordinal needs integer bounds")
        if self.kind == "binary" and self.categories is None:
            object.__setattr__(self, "categories", (0.0, 1.0))
        if self.categories is not None:
            object.__setattr__(self, "categories", tuple(sorted(float(c) for c in self.categories)))

    @property
    def numeric(self):
        return self.kind in ("continuous", "ordinal")

    def to_dict(self):
        out = {"name": self.name, "role": self.role, "kind": self.kind}
        if self.bounds is not None:
            out["bounds"] = list(self.bounds)
        if self.evolution_rule is not None:
            out["evolution_rule"] = self.evolution_rule
        if self.round_to_integer:
            out["round_to_integer"] = True
        if self.categories is not None and self.kind != "binary":
            out["categories"] = list(self.categories)
        return out


@dataclass(frozen=True)
class Schema:
    variables: tuple
    unit_id: str = "unit"
    event_time: str = "tau"
    treatment: str = "treated"
    outcome: str = "eurod"
    eurod_outcome: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate variable names in schema")
        reserved = {self.unit_id, self.event_time, self.treatment, SYNTHETIC_FLAG}
        if len(reserved) != 4:
            raise SchemaError("unit_id, event_time and treatment must be distinct columns")
        clash = reserved.intersection(names)
        if clash:
            raise SchemaError(f"variables clash with reserved columns: {sorted(clash)}")
        if self.outcome not in names:
            raise SchemaError(f"outcome {self.outcome!r} is not a declared variable")
        out = self[self.outcome]
        if out.role != "dynamic":
            raise SchemaError("the outcome must be a dynamic variable")
        if self.eurod_outcome and (out.bounds != (0.0, 12.0) or not out.round_to_integer):
            raise SchemaError("a EURO-D outcome must have bounds [0, 12] and round_to_integer")

    def __getitem__(self, name):
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def static(self):
        return [v for v in self.variables if v.role == "static"]

    @property
    def dynamic(self):
        return [v for v in self.variables if v.role == "dynamic"]

    @property
    def anchored(self):
        """Dynamic variables whose -1 value is copied into the skeleton."""
        return [v for v in self.dynamic if v.name == self.outcome or v.evolution_rule is not None]

    def baseline_name(self, name):
        return f"{name}_baseline"

    @property
    def skeleton_columns(self):
        return (
            [v.name for v in self.static]
            + [self.treatment]
            + [self.baseline_name(v.name) for v in self.anchored]
        )

    def skeleton_specs(self):
        """VariableSpec describing each skeleton column, in layout order."""
        specs = list(self.static)
        specs.append(VariableSpec(self.treatment, "static", "binary"))
        for v in self.anchored:
            specs.append(
                VariableSpec(
                    self.baseline_name(v.name),
                    "static",
                    v.kind,
                    v.bounds,
                    None,
                    v.round_to_integer,
                    v.categories,
                )
            )
        return specs

    @property
    def columns(self):
        return [self.unit_id, self.event_time, self.treatment] + [v.name for v in self.variables]

    @classmethod
    def from_dict(cls, d):
        try:
            variables = [
                VariableSpec(
                    name=v["name"],
                    role=v["role"],
                    kind=v["kind"],
                    bounds=tuple(v["bounds"]) if v.get("bounds") is not None else None,
                    evolution_rule=v.get("evolution_rule"),
                    round_to_integer=bool(v.get("round_to_integer", False)),
                    categories=tuple(v["categories"]) if v.get("categories") else None,
                )
                for v in d["variables"]
            ]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed variable declaration: {exc}") from exc
        keys = ("unit_id", "event_time", "treatment", "outcome", "eurod_outcome")
        return cls(variables=variables, **{k: d[k] for k in keys if k in d})

    def to_dict(self):
        return {
            "unit_id": self.unit_id,
            "event_time": self.event_time,
            "treatment": self.treatment,
            "outcome": self.outcome,
            "eurod_outcome": self.eurod_outcome,
            "variables": [v.to_dict() for v in self.variables],
        }


@dataclass(frozen=True)
class LongPanel:
    """One row per (unit, period).

    ``data`` always contains the unit id and treatment columns plus every
    declared variable. When ``aligned`` is true it also has the event-time
    column; before alignment rows are keyed by ``wave_column`` instead.
    Missing cells are NaN.
    """

    data: pd.DataFrame
    schema: Schema
    aligned: bool = True
    wave_column: Optional[str] = None

    @property
    def time_column(self):
        return self.schema.event_time if self.aligned else self.wave_column

    @property
    def units(self):
        return np.unique(self.data[self.schema.unit_id].to_numpy())

    @property
    def n_units(self):
        return len(self.units)

    def observed_range(self):
        g = self.data.groupby(self.schema.unit_id)[self.time_column]
        return pd.DataFrame({"first": g.min(), "last": g.max()})

    def unit_treatment(self):
        s = self.schema
        return self.data.groupby(s.unit_id)[s.treatment].first()

    def subset_units(self, units):
        mask = self.data[self.schema.unit_id].isin(np.asarray(units))
        return LongPanel(self.data.loc[mask].reset_index(drop=True), self.schema, self.aligned, self.wave_column)

    def baseline(self):
        """Per-unit rows at event time -1, indexed by unit id."""
        s = self.schema
        rows = self.data[self.data[s.event_time] == -1]
        return rows.set_index(s.unit_id).sort_index()

    def to_csv(self, path):
        self.data.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

    def validate(self):
        validate_panel(self)
        return self


def validate_panel(panel):
    s = panel.schema
    df = panel.data
    key = [s.unit_id, panel.time_column]
    dup = df.duplicated(key, keep=False)
    if dup.any():
        first = df.loc[dup].iloc[0]
        raise IntegrityError(
            f"duplicate ({s.unit_id}, {panel.time_column}) = "
            f"({_fmt(first[s.unit_id])}, {_fmt(first[panel.time_column])}): unit {_fmt(first[s.unit_id])}"
        )
    constant = [s.treatment] + [v.name for v in s.static]
    g = df.groupby(s.unit_id)
    for col in constant:
        n = g[col].nunique(dropna=True)
        bad = n[n > 1]
        if len(bad):
            raise IntegrityError(f"column {col!r} varies within unit {_fmt(bad.index[0])}")
    if panel.aligned:
        tau = df[s.event_time]
        pre = tau.lt(0).groupby(df[s.unit_id]).any()
        post = tau.ge(0).groupby(df[s.unit_id]).any()
        bad = pre.index[~(pre & post)]
        if len(bad):
            raise IntegrityError(
                f"unit {_fmt(bad[0])} lacks a pre-event or post-event observation"
            )


def _fmt(x):
    if isinstance(x, float) and x.is_integer():
        return str(int(x))
    return str(x)


def load_long_csv(path, schema, wave_column=None):
    """Read a long-format CSV and validate it against ``schema``.

    If the header contains the schema's event-time column the panel is treated
    as aligned. Otherwise ``wave_column`` must name the raw survey wave and the
    result still needs :func:`align_event_time`.
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    header = list(raw.columns)
    aligned = schema.event_time in header
    time_col = schema.event_time if aligned else wave_column
    if time_col is None:
        raise SchemaError(
            f"header has no {schema.event_time!r} column and no wave column was given"
        )
    allowed = set(schema.columns) | {SYNTHETIC_FLAG, time_col}
    unknown = [c for c in header if c not in allowed]
    if unknown:
        raise SchemaError(f"unknown column(s) {unknown}")
    required = [schema.unit_id, schema.treatment, time_col] + [v.name for v in schema.variables]
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"missing column(s) {missing}")

    out = {}
    for col in header:
        if col == SYNTHETIC_FLAG:
            out[col] = raw[col].str.strip().str.lower().isin(("1", "true"))
            continue
        out[col] = _parse_numeric(raw[col], col)
        if col in (schema.unit_id, time_col, schema.treatment) and out[col].isna().any():
            row = int(np.flatnonzero(out[col].isna().to_numpy())[0]) + 2
            raise ParseError(f"empty {col!r} at row {row}", row=row)
    df = pd.DataFrame(out, columns=header)
    df[time_col] = df[time_col].astype(np.int64)
    df[schema.unit_id] = _maybe_int(df[schema.unit_id])
    panel = LongPanel(df, schema, aligned=aligned, wave_column=None if aligned else wave_column)
    validate_panel(panel)
    return panel


def _parse_numeric(col, name):
    stripped = col.str.strip()
    values = pd.to_numeric(stripped.replace("", np.nan), errors="coerce")
    bad = values.isna() & stripped.ne("")
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(
            f"non-numeric value {col.iloc[i]!r} in column {name!r} at row {i + 2}", row=i + 2
        )
    return values.astype(float)


def _maybe_int(s):
    if s.notna().all() and np.all(np.floor(s) == s):
        return s.astype(np.int64)
    return s


def align_event_time(panel, raw_wave, event_wave_per_unit):
    """Center every unit on its event: tau = wave - event_wave.

    Units with no pre-event or no post-event wave are dropped with a warning.
    """
    s = panel.schema
    df = panel.data.copy()
    units = df[s.unit_id]
    event_map = dict(event_wave_per_unit)
    missing = [u for u in pd.unique(units) if u not in event_map]
    if missing:
        raise AlignmentError(f"no event wave for unit(s) {missing[:5]}")
    df[s.event_time] = (df[raw_wave] - units.map(event_map)).astype(np.int64)
    df = df.drop(columns=[raw_wave])
    pre = df[s.event_time].lt(0).groupby(units).any()
    post = df[s.event_time].ge(0).groupby(units).any()
    keep = pre.index[pre & post]
    dropped = len(pre) - len(keep)
    if dropped:
        logger.warning("dropped %d unit(s) without both pre- and post-event waves", dropped)
    df = df[df[s.unit_id].isin(keep)]
    cols = [s.unit_id, s.event_time] + [c for c in df.columns if c not in (s.unit_id, s.event_time)]
    df = df[cols].sort_values([s.unit_id, s.event_time]).reset_index(drop=True)
    out = LongPanel(df, s, aligned=True)
    validate_panel(out)
    return out


def event_times(window):
    lo, hi = window
    if lo > -1 or hi < 0:
        raise LayoutError(f"window {window} must contain -1 and 0")
    return list(range(lo, hi + 1))


def padding_sentinel(lo, hi):
    span = hi - lo
    if span <= 0:
        span = 1.0
    return lo - 10.0 * span


@dataclass(frozen=True)
class WideTable:
    values: np.ndarray
    unit_ids: np.ndarray
    columns: tuple
    n_skeleton: int
    window: tuple
    sentinels: np.ndarray
    schema: Schema = field(repr=False)

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def skeleton(self):
        return self.values[:, : self.n_skeleton]

    @property
    def trajectory(self):
        return self.values[:, self.n_skeleton :]

    @property
    def treatment(self):
        return self.values[:, self.columns.index(self.schema.treatment)]

    def column_spec(self, j):
        """VariableSpec governing wide column ``j``."""
        if j < self.n_skeleton:
            return self.schema.skeleton_specs()[j]
        n_tau = len(event_times(self.window))
        return self.schema.dynamic[(j - self.n_skeleton) // n_tau]

    def column_tau(self, j):
        if j < self.n_skeleton:
            return None
        taus = event_times(self.window)
        return taus[(j - self.n_skeleton) % len(taus)]

    def observed_mask(self):
        """True where a cell holds data, i.e. is neither sentinel nor NaN."""
        mask = ~np.isnan(self.values)
        traj = self.values[:, self.n_skeleton :]
        mask[:, self.n_skeleton :] &= traj != self.sentinels[self.n_skeleton :]
        return mask

    def rows(self, idx):
        idx = np.asarray(idx)
        return self.replace(values=self.values[idx], unit_ids=self.unit_ids[idx])

    def replace(self, **kw):
        base = dict(
            values=self.values,
            unit_ids=self.unit_ids,
            columns=self.columns,
            n_skeleton=self.n_skeleton,
            window=self.window,
            sentinels=self.sentinels,
            schema=self.schema,
        )
        base.update(kw)
        return WideTable(**base)

    def to_frame(self):
        df = pd.DataFrame(self.values, columns=list(self.columns))
        df.insert(0, self.schema.unit_id, self.unit_ids)
        return df

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def trajectory_columns(schema, window):
    return [f"{v.name}@{t}" for v in schema.dynamic for t in event_times(window)]


def column_sentinels(schema, window, data=None):
    """Sentinel per wide column (NaN for skeleton columns).

    Declared bounds fix the sentinel; undeclared bounds fall back to the
    observed range of ``data``.
    """
    n_tau = len(event_times(window))
    out = [np.nan] * len(schema.skeleton_columns)
    for v in schema.dynamic:
        if v.bounds is not None:
            lo, hi = v.bounds
        elif data is not None and data[v.name].notna().any():
            lo, hi = float(data[v.name].min()), float(data[v.name].max())
        else:
            lo, hi = 0.0, 1.0
        out.extend([padding_sentinel(lo, hi)] * n_tau)
    return np.asarray(out, dtype=float)


def to_wide(panel, window=DEFAULT_WINDOW):
    """Flatten an aligned panel to one row per unit.

    Units whose baseline row lacks a static covariate or anchored value are
    dropped (count logged). A unit with no row at event time -1 raises
    :class:`BaselineError`.
    """
    s = panel.schema
    if not panel.aligned:
        raise LayoutError("panel must be aligned before reshaping")
    taus = event_times(window)
    df = panel.data
    units = np.sort(pd.unique(df[s.unit_id]))
    base = panel.baseline()
    no_base = np.setdiff1d(units, base.index.to_numpy())
    if len(no_base):
        raise BaselineError(f"unit {_fmt(no_base[0])} has no baseline (tau=-1) row")

    static_names = [v.name for v in s.static]
    anchored = [v.name for v in s.anchored]
    skel = np.column_stack(
        [base.loc[units, c].to_numpy(float) for c in static_names]
        + [base.loc[units, s.treatment].to_numpy(float)]
        + [base.loc[units, c].to_numpy(float) for c in anchored]
    ) if len(units) else np.empty((0, len(s.skeleton_columns)))
    keep = ~np.isnan(skel).any(axis=1)
    if (~keep).any():
        logger.warning("dropped %d unit(s) with missing baseline covariates", int((~keep).sum()))
    units, skel = units[keep], skel[keep]

    sentinels = column_sentinels(s, window, df)
    in_win = df[df[s.event_time].between(taus[0], taus[-1]) & df[s.unit_id].isin(units)]
    row_of = {u: i for i, u in enumerate(units)}
    n_tau = len(taus)
    traj = np.tile(sentinels[len(s.skeleton_columns):], (len(units), 1))
    ri = in_win[s.unit_id].map(row_of).to_numpy()
    ti = in_win[s.event_time].to_numpy() - taus[0]
    for k, v in enumerate(s.dynamic):
        vals = in_win[v.name].to_numpy(float)
        obs = ~np.isnan(vals)
        traj[ri[obs], k * n_tau + ti[obs]] = vals[obs]
    values = np.hstack([skel, traj])
    columns = tuple(s.skeleton_columns + trajectory_columns(s, window))
    return WideTable(values, units, columns, len(s.skeleton_columns), tuple(window), sentinels, s)


def to_long_with_rules(wide, schema=None):
    """Rebuild a long panel, dropping padding and applying deterministic rules.

    A (unit, tau) row is emitted when tau = -1 or when any non-rule dynamic
    cell at that tau is observed. Anchored variables take their tau = -1
    value from the skeleton; variables with an evolution rule are
    overwritten as ``baseline + increment * (tau + 1)``.
    """
    s = schema or wide.schema
    taus = event_times(wide.window)
    n_tau = len(taus)
    n_skel = len(s.skeleton_columns)
    if wide.values.ndim != 2 or wide.width != n_skel + len(s.dynamic) * n_tau:
        raise LayoutError(
            f"wide width {wide.values.shape[-1]} does not match schema "
            f"({n_skel} + {len(s.dynamic)} x {n_tau})"
        )
    n = wide.n_rows
    skel = wide.values[:, :n_skel]
    traj = wide.values[:, n_skel:].reshape(n, len(s.dynamic), n_tau)
    sent = wide.sentinels[n_skel:].reshape(len(s.dynamic), n_tau)
    observed = (traj != sent[None]) & ~np.isnan(traj)
    rule_idx = [k for k, v in enumerate(s.dynamic) if v.evolution_rule is not None]
    free_idx = [k for k in range(len(s.dynamic)) if k not in rule_idx]
    present = observed[:, free_idx, :].any(axis=1) if free_idx else observed.any(axis=1)
    present[:, taus.index(-1)] = True

    r, t = np.nonzero(present)
    cols = {s.unit_id: wide.unit_ids[r], s.event_time: np.asarray(taus, dtype=np.int64)[t]}
    cols[s.treatment] = skel[r, n_skel - len(s.anchored) - 1]
    static_pos = {v.name: i for i, v in enumerate(s.static)}
    anchor_pos = {v.name: n_skel - len(s.anchored) + i for i, v in enumerate(s.anchored)}
    tau_vals = cols[s.event_time].astype(float)
    for k, v in enumerate(s.dynamic):
        vals = np.where(observed[r, k, t], traj[r, k, t], np.nan)
        if v.name in anchor_pos:
            base = skel[r, anchor_pos[v.name]]
            vals = np.where(tau_vals == -1, base, vals)
            if v.evolution_rule is not None:
                vals = base + v.evolution_rule * (tau_vals + 1.0)
        cols[v.name] = vals
    for v in s.static:
        cols[v.name] = skel[r, static_pos[v.name]]
    df = pd.DataFrame(cols)[s.columns]
    return LongPanel(df.reset_index(drop=True), s, aligned=True)


def empirical_bounds(panel):
    """Observed [min, max] of every declared variable."""
    out = {}
    for v in panel.schema.variables:
        col = panel.data[v.name].dropna()
        if len(col):
            out[v.name] = (float(col.min()), float(col.max()))
    return out


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def clamp_domains(panel, schema, empirical_bounds):
    """Clip numeric variables into their empirical range and snap codes.

    Integer-flagged columns are rounded half away from zero after clipping;
    categorical and binary columns snap to the nearest legal code. Variables
    with an evolution rule are left untouched.
    """
    df = panel.data.copy()
    for v in schema.variables:
        if v.evolution_rule is not None:
            # derived from an exact real baseline; clipping would break the rule
            continue
        x = df[v.name].to_numpy(float)
        if v.name in empirical_bounds:
            lo, hi = empirical_bounds[v.name]
        elif v.bounds is not None:
            lo, hi = v.bounds
        else:
            lo, hi = -np.inf, np.inf
        if v.bounds is not None:
            lo, hi = max(lo, v.bounds[0]), min(hi, v.bounds[1])
        if v.numeric:
            x = np.clip(x, lo, hi)
            if v.round_to_integer:
                x = np.clip(round_half_away(x), np.ceil(lo), np.floor(hi))
        else:
            codes = np.asarray(v.categories) if v.categories is not None else None
            if codes is None:
                lo_i, hi_i = np.ceil(lo), np.floor(hi)
                x = np.clip(round_half_away(x), lo_i, hi_i)
            else:
                obs = ~np.isnan(x)
                idx = np.abs(x[obs, None] - codes[None, :]).argmin(axis=1)
                x[obs] = codes[idx]
        df[v.name] = x
    return LongPanel(df, panel.schema, panel.aligned, panel.wave_column)


def split_skeleton(wide, schema=None):
    """Return (skeleton matrix, trajectory matrix) as copies."""
    return wide.skeleton.copy(), wide.trajectory.copy()


def recombine(skeleton, trajectory, template, unit_ids=None):
    values = np.hstack([np.asarray(skeleton, float), np.asarray(trajectory, float)])
    if values.shape[1] != template.width:
        raise LayoutError(f"recombined width {values.shape[1]} != {template.width}")
    ids = template.unit_ids if unit_ids is None else np.asarray(unit_ids)
    return template.replace(values=values, unit_ids=ids)
