"""Config-driven stage chain with per-stage seeds and a checksummed manifest.

Stages run in the fixed order ingest, augment, match, estimate, evaluate,
robustness. Each stage's seed is derived from the root seed and the stage's
fixed identifier, so enabling or disabling a stage never changes the
randomness seen by any other stage.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
import yaml

from panelsynth import estimator as est
from panelsynth import plotting
from panelsynth.errors import (
    ConfigError,
    DataError,
    NumericError,
    PanelSynthError,
    StageError,
)
from panelsynth.fidelity import FidelityConfig, evaluate_all
from panelsynth.generator import GenConfig, augment, checkpoint_json
from panelsynth.panel import (
    DEFAULT_WINDOW,
    SYNTHETIC_FLAG,
    LongPanel,
    Schema,
    align_event_time,
    load_long_csv,
)
from panelsynth.robustness import (
    R_MAX_FACTOR,
    matched_event_study,
    oster_table,
    subgroup_rerun,
    uncontrolled_fit,
)

logger = logging.getLogger(__name__)

STAGES = ("ingest", "augment", "match", "estimate", "evaluate", "robustness")
STAGE_IDS = {name: i for i, name in enumerate(STAGES)}
REQUIRES = {
    "augment": ("ingest",),
    "match": ("ingest",),
    "estimate": ("ingest", "match"),
    "evaluate": ("ingest", "augment"),
    "robustness": ("ingest", "match", "estimate"),
}
MANIFEST_VERSION = "panelsynth-manifest/1"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_KEYS = {
    "schema",
    "schema_path",
    "input",
    "stages",
    "seed",
    "output_dir",
    "window",
    "generator",
    "augment",
    "matching",
    "estimation",
    "fidelity",
    "robustness",
}


def stage_seed(root_seed, stage):
    """32-bit seed for ``stage`` spawned from the root seed by stage identifier."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=(STAGE_IDS[stage],))
    return int(ss.generate_state(1)[0])


@dataclass
class PipelineConfig:
    schema: Schema
    panel_path: str
    stages: tuple = STAGES
    seed: int = 0
    output_dir: str = "out"
    window: tuple = DEFAULT_WINDOW
    wave_column: Optional[str] = None
    event_waves_path: Optional[str] = None
    generator: GenConfig = field(default_factory=GenConfig)
    n_target_per_arm: object = 1000
    augment_factor: Optional[float] = None
    match_covariates: tuple = ()
    caliper: float = 0.2
    covariates: tuple = ()
    dynamic_ols: bool = True
    fidelity_folds: int = 5
    r_max_factor: float = R_MAX_FACTOR
    subgroup_column: Optional[str] = None
    source: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.stages = tuple(self.stages)
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stage(s) {bad}; choose from {list(STAGES)}")
        if list(self.stages) != [s for s in STAGES if s in self.stages]:
            raise ConfigError(f"stages must follow the order {list(STAGES)}")
        for s in self.stages:
            missing = [r for r in REQUIRES.get(s, ()) if r not in self.stages]
            if missing:
                raise ConfigError(f"stage {s!r} requires {missing}")
        if not self.stages:
            raise ConfigError("no stages selected")
        self.window = tuple(int(w) for w in self.window)
        names = {v.name for v in self.schema.variables}
        static = {v.name for v in self.schema.static}
        dynamic = {v.name for v in self.schema.dynamic}
        for c in self.match_covariates:
            if c not in names:
                raise ConfigError(f"matching covariate {c!r} is not in the schema")
        for c in self.covariates:
            if c not in dynamic or c == self.schema.outcome:
                raise ConfigError(f"estimation covariate {c!r} must be a time-varying, non-outcome variable")
        if "match" in self.stages and not self.match_covariates:
            raise ConfigError("the match stage needs matching.covariates")
        if self.subgroup_column is not None and self.subgroup_column not in static:
            raise ConfigError(f"subgroup column {self.subgroup_column!r} must be a static variable")
        if self.caliper <= 0:
            raise ConfigError("caliper must be positive")
        if self.r_max_factor < 1:
            raise ConfigError("r_max_factor must be at least 1")

    @classmethod
    def from_dict(cls, d, base_dir="."):
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        extra = set(d) - CONFIG_KEYS
        if extra:
            raise ConfigError(f"unknown config key(s) {sorted(extra)}")

        def path(p):
            return p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

        if "schema" in d:
            schema = Schema.from_dict(d["schema"])
        elif "schema_path" in d:
            schema = load_schema(path(d["schema_path"]))
        else:
            raise ConfigError("config needs 'schema' or 'schema_path'")
        inp = d.get("input") or {}
        if "panel" not in inp:
            raise ConfigError("config needs input.panel")
        aug = d.get("augment") or {}
        match = d.get("matching") or {}
        estim = d.get("estimation") or {}
        rob = d.get("robustness") or {}
        fid = d.get("fidelity") or {}
        n_target = aug.get("n_target_per_arm", 1000)
        if isinstance(n_target, dict):
            n_target = {int(k): int(v) for k, v in n_target.items()}
        return cls(
            schema=schema,
            panel_path=path(inp["panel"]),
            wave_column=inp.get("wave_column"),
            event_waves_path=path(inp.get("event_waves")),
            stages=tuple(d.get("stages", STAGES)),
            seed=int(d.get("seed", 0)),
            output_dir=path(d.get("output_dir", "out")),
            window=tuple(d.get("window", DEFAULT_WINDOW)),
            generator=GenConfig.from_dict(d.get("generator") or {}),
            n_target_per_arm=n_target,
            augment_factor=aug.get("factor"),
            match_covariates=tuple(match.get("covariates", ())),
            caliper=float(match.get("caliper", 0.2)),
            covariates=tuple(estim.get("covariates", ())),
            dynamic_ols=bool(estim.get("dynamic_ols", True)),
            fidelity_folds=int(fid.get("folds", 5)),
            r_max_factor=float(rob.get("r_max_factor", R_MAX_FACTOR)),
            subgroup_column=rob.get("subgroup_column"),
            source=d,
        )

    def validate_paths(self):
        for p in (self.panel_path, self.event_waves_path):
            if p is not None and not os.path.exists(p):
                raise ConfigError(f"input path does not exist: {p}")
        if self.wave_column is not None and self.event_waves_path is None:
            raise ConfigError("input.wave_column needs input.event_waves")


def load_schema(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return Schema.from_dict(yaml.safe_load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read schema {path}: {exc}") from exc


def load_config(path, seed=None, output_dir=None, stages=None):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    raw = dict(raw or {})
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = os.path.abspath(output_dir)
    if stages is not None:
        raw["stages"] = list(stages)
    return PipelineConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


# report writers

def _csv(frame, path):
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    return path


def _json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


@dataclass
class ResultsBundle:
    event_study: object = None
    models: dict = field(default_factory=dict)
    fidelity: object = None
    oster: list = None
    balance: object = None


REPORT_FILES = {
    "coefficients": "coefficients.csv",
    "plot_data": "event_study.csv",
    "fidelity": "fidelity.json",
    "oster": "oster.json",
    "balance": "balance.json",
}


def emit_report(bundle, out_dir):
    """Write the delimited and JSON reports for whatever the bundle holds.

    Returns a mapping of report kind to written path.
    """
    has_any = bundle.event_study is not None or bundle.fidelity is not None or bundle.oster or bundle.balance
    if not has_any:
        raise DataError("emit_report needs at least one result")
    written = {}
    try:
        os.makedirs(out_dir, exist_ok=True)
        if bundle.event_study is not None:
            models = dict(bundle.models) or {bundle.event_study.label: bundle.event_study}
            written["coefficients"] = _csv(
                est.coefficients_frame(models), os.path.join(out_dir, REPORT_FILES["coefficients"])
            )
            written["plot_data"] = _csv(
                est.event_plot_frame(bundle.event_study), os.path.join(out_dir, REPORT_FILES["plot_data"])
            )
        if bundle.fidelity is not None:
            written["fidelity"] = _json(bundle.fidelity.to_dict(), os.path.join(out_dir, REPORT_FILES["fidelity"]))
        if bundle.oster:
            written["oster"] = _json([o.to_dict() for o in bundle.oster], os.path.join(out_dir, REPORT_FILES["oster"]))
        if bundle.balance is not None:
            written["balance"] = _json(bundle.balance.to_dict(), os.path.join(out_dir, REPORT_FILES["balance"]))
    except OSError as exc:
        raise OSError(f"cannot write report under {out_dir}: {exc}") from exc
    return written


# stage runners

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    def __init__(self, config):
        self.config = config
        self.out = config.output_dir
        self.artifacts = []
        self.real = None
        self.synthetic = None
        self.panel = None
        self.analysis = None
        self.bundle = ResultsBundle()

    def record(self, path, stage, kind="numeric"):
        self.artifacts.append(
            {
                "file": os.path.relpath(path, self.out).replace(os.sep, "/"),
                "stage": stage,
                "kind": kind,
                "sha256": sha256_file(path),
                "seed": stage_seed(self.config.seed, stage),
            }
        )

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def ingest(self):
        c = self.config
        panel = load_long_csv(c.panel_path, c.schema, wave_column=c.wave_column)
        if not panel.aligned:
            events = pd.read_csv(c.event_waves_path)
            if c.schema.unit_id not in events.columns or "event_wave" not in events.columns:
                raise DataError(f"{c.event_waves_path} needs columns {c.schema.unit_id!r} and 'event_wave'")
            panel = align_event_time(panel, c.wave_column, zip(events[c.schema.unit_id], events["event_wave"]))
        s = c.schema
        df = panel.data.sort_values([s.unit_id, s.event_time], kind="stable").reset_index(drop=True)
        if SYNTHETIC_FLAG in df.columns:
            df = df.drop(columns=[SYNTHETIC_FLAG])
        self.real = LongPanel(df[s.columns], s)
        self.panel = self.real
        self.record(_csv(self.real.data, self.path("panel.csv")), "ingest")
        self.record(_json(s.to_dict(), self.path("schema.json")), "ingest")

    def targets(self):
        c = self.config
        if c.augment_factor is not None:
            arm = self.real.unit_treatment()
            return {a: int(round(c.augment_factor * int((arm == a).sum()))) for a in (0, 1)}
        return c.n_target_per_arm

    def augment(self):
        c = self.config
        gen_cfg = GenConfig(**{**c.generator.to_dict(), "seed": stage_seed(c.seed, "augment")})
        models = {}
        synth = augment(self.real, c.schema, gen_cfg, self.targets(), c.window, models=models)
        self.synthetic = synth
        real = self.real.data.assign(**{SYNTHETIC_FLAG: False})
        combined = pd.concat([real, synth.data], ignore_index=True)
        self.panel = LongPanel(combined, c.schema)
        self.record(_csv(synth.data, self.path("synthetic_panel.csv")), "augment")
        self.record(_csv(combined, self.path("augmented_panel.csv")), "augment")
        for arm, model in sorted(models.items()):
            p = self.path("models", f"generator_arm{arm}.json")
            with open(p, "w", encoding="utf-8") as fh:
                fh.write(checkpoint_json(model))
            self.record(p, "augment", kind="model")
        o = c.schema.outcome
        fig = plotting.outcome_distribution_figure(
            self.real.data[o].dropna(), synth.data[o].dropna(), self.path("figures", "outcome_distribution.png")
        )
        self.record(fig, "augment", kind="figure")

    def match(self):
        c = self.config
        self.analysis = matched_event_study(
            self.panel, c.match_covariates, c.covariates, c.window, c.caliper
        )
        a = self.analysis
        self.bundle.balance = a.balance
        self.record(_json(a.propensity.to_dict(), self.path("propensity.json")), "match")
        self.record(_csv(a.matched.pairs_frame(), self.path("matched_pairs.csv")), "match")
        self.record(_json(a.matched.to_dict(), self.path("matching.json")), "match")
        fig = plotting.balance_figure(a.balance.rows, self.path("figures", "balance.png"), a.balance.threshold)
        self.record(fig, "match", kind="figure")

    def estimate(self):
        c = self.config
        matched = self.analysis.result
        models = {
            "did_base": est.fit_event_study(self.panel, None, c.covariates, c.window, label="did_base"),
            "matched_did": matched,
        }
        if c.dynamic_ols:
            models["dynamic_ols"] = est.fit_dynamic_ols(self.panel, c.covariates, c.window)
        self.bundle.event_study = matched
        self.bundle.models = models
        tests = {}
        for name in ("did_base", "matched_did"):
            w = est.pretrend_joint_test(models[name])
            tests[name] = {"statistic": w.statistic, "dof": w.dof, "p_value": w.p_value, "terms": w.terms}
        self.record(_json(tests, self.path("pretrend_test.json")), "estimate")
        r2 = {
            name: {"r2_within": m.r2_within, "r2_overall": m.r2_overall, "r2_adj_within": m.r2_adj_within,
                   "r2_adj_overall": m.r2_adj_overall, "n_obs": m.n_obs, "n_clusters": m.n_clusters}
            for name, m in models.items() if isinstance(m, est.EventStudyResult)
        }
        if "dynamic_ols" in models:
            d = models["dynamic_ols"]
            r2["dynamic_ols"] = {"r2": d.r2, "r2_adj": d.r2_adj, "n_obs": d.n_obs, "n_clusters": d.n_clusters,
                                 "lag_coef": d.lag_coef, "lag_se": d.lag_se}
        self.record(_json(r2, self.path("model_fit.json")), "estimate")
        fig = plotting.event_study_figure(est.event_plot_frame(matched), self.path("figures", "event_study.png"))
        self.record(fig, "estimate", kind="figure")

    def evaluate(self):
        c = self.config
        cfg = FidelityConfig(folds=c.fidelity_folds, seed=stage_seed(c.seed, "evaluate"), window=c.window)
        self.bundle.fidelity = evaluate_all(self.real, self.synthetic, cfg)

    def robustness(self):
        c = self.config
        controlled = self.analysis.result
        base = uncontrolled_fit(self.panel, self.analysis.matched, c.window)
        self.bundle.oster = oster_table(controlled, base, c.r_max_factor)
        if c.subgroup_column is not None:
            base_rows = self.panel.baseline()
            grouping = base_rows[c.subgroup_column]
            report = subgroup_rerun(self.panel, grouping, c.match_covariates, c.covariates, c.window, c.caliper)
            for label, res in report.results.items():
                tag = _label(label)
                p = self.path("subgroups", f"{c.subgroup_column}={tag}_coefficients.csv")
                self.record(_csv(est.coefficients_frame({tag: res}), p), "robustness")
            self.record(_json(report.to_dict(), self.path("subgroups", "report.json")), "robustness")


def _label(value):
    if isinstance(value, (float, np.floating)) and float(value).is_integer():
        return str(int(value))
    return str(value)


REPORT_STAGE = {"coefficients": "estimate", "plot_data": "estimate", "fidelity": "evaluate",
                "oster": "robustness", "balance": "match"}


@dataclass
class PipelineOutcome:
    status: int
    manifest: dict
    bundle: ResultsBundle
    error: Optional[BaseException] = None


def exit_code_for(exc):
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_NUMERIC


def config_digest(config):
    # the output location is not part of what makes two runs comparable
    src = {k: v for k, v in config.source.items() if k != "output_dir"}
    text = json.dumps(src, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_pipeline(config):
    """Run the configured stages; always writes a manifest."""
    config.validate_paths()
    os.makedirs(config.output_dir, exist_ok=True)
    run = _Run(config)
    completed = []
    error = None
    for stage in config.stages:
        logger.info("stage %s (seed %d)", stage, stage_seed(config.seed, stage))
        try:
            getattr(run, stage)()
        except PanelSynthError as exc:
            error = exc if isinstance(exc, StageError) else StageError(stage, exc)
            logger.error("%s", error)
            break
        completed.append(stage)
    has_results = run.bundle.event_study is not None or run.bundle.fidelity or run.bundle.oster or run.bundle.balance
    if has_results:
        for kind, p in emit_report(run.bundle, config.output_dir).items():
            run.record(p, REPORT_STAGE[kind])
    manifest = {
        "version": MANIFEST_VERSION,
        "config_sha256": config_digest(config),
        "root_seed": config.seed,
        "stages_requested": list(config.stages),
        "stages_completed": completed,
        "status": "ok" if error is None else "failed",
        "error": None if error is None else {"stage": error.stage, "message": str(error.cause),
                                             "type": type(error.cause).__name__},
        "artifacts": sorted(run.artifacts, key=lambda a: a["file"]),
    }
    _json(manifest, os.path.join(config.output_dir, "manifest.json"))
    status = EXIT_OK if error is None else exit_code_for(error)
    return PipelineOutcome(status, manifest, run.bundle, error)


def validate_config(config):
    """Check paths and that the input panel loads and validates, without running stages."""
    config.validate_paths()
    panel = load_long_csv(config.panel_path, config.schema, wave_column=config.wave_column)
    return panel


__all__ = [
    "PipelineConfig",
    "ResultsBundle",
    "emit_report",
    "load_config",
    "run_pipeline",
    "stage_seed",
    "validate_config",
]
