"""Ground-truth panel simulator.

Outcome model, for unit i at event time t::

    Y_it = alpha_i + lambda_t + sum_k a_k D_i 1{t = k} + gamma X_it
           + slope_gap D_i t 1{t < 0} + covariate_trend (w'Z_i) t + eps_it

Treatment follows a latent logistic index in the static covariates Z, and the
``n_treated`` units with the highest index are treated, so arm sizes are exact.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from panelsynth.errors import ConfigError
from panelsynth.panel import DEFAULT_WINDOW, LongPanel, Schema, VariableSpec, event_times

logger = logging.getLogger(__name__)

OUTCOME = "eurod"
EURO_D_LEVEL = 4.0
AGE_STEP = 2.0


@dataclass
class DgpConfig:
    n_treated: int = 200
    n_control: int = 200
    window: tuple = DEFAULT_WINDOW
    effects: tuple = (0.0, 0.0, 0.0)
    slope_gap: float = 0.0
    selection: float = 0.0
    n_covariates: int = 2
    unit_sd: float = 1.0
    noise_sd: float = 1.0
    attrition: float = 0.0
    seed: int = 0
    covariate_trend: float = 0.0
    covariate_level: float = 0.5
    gamma: float = 0.5
    time_sd: float = 0.3
    eurod_mode: bool = False
    include_age: bool = False

    def __post_init__(self):
        self.window = tuple(int(w) for w in self.window)
        self.effects = tuple(float(a) for a in self.effects)
        lo, hi = self.window
        if not lo <= -2 or hi < 0:
            raise ConfigError("window must span at least tau=-2..0")
        if self.n_treated < 0 or self.n_control < 0:
            raise ConfigError("unit counts must be non-negative")
        if self.noise_sd <= 0:
            raise ConfigError("noise_sd must be positive")
        if len(self.effects) != hi + 1:
            raise ConfigError(f"effects must have {hi + 1} entries for window {self.window}")
        if not 0 <= self.attrition < 1:
            raise ConfigError("attrition hazard must lie in [0, 1)")
        if self.n_covariates < 1:
            raise ConfigError("need at least one static covariate")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown dgp keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["window"] = list(self.window)
        d["effects"] = list(self.effects)
        return d


@dataclass
class GroundTruth:
    config: dict
    effects: dict
    time_effects: dict
    selection_weights: list
    gamma: float
    slope_gap: float
    covariate_trend: float
    unit_effects: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["effects"] = {int(k): v for k, v in d["effects"].items()}
        d["time_effects"] = {int(k): v for k, v in d["time_effects"].items()}
        d["unit_effects"] = {int(k): v for k, v in d["unit_effects"].items()}
        return cls(**d)


def covariate_names(k):
    return [f"z{j + 1}" for j in range(k)]


def dgp_schema(config):
    vars_ = [VariableSpec(name, "static", "continuous") for name in covariate_names(config.n_covariates)]
    if config.include_age:
        vars_.append(VariableSpec("age", "dynamic", "continuous", evolution_rule=AGE_STEP))
    vars_.append(VariableSpec("x", "dynamic", "continuous"))
    if config.eurod_mode:
        vars_.append(VariableSpec(OUTCOME, "dynamic", "ordinal", bounds=(0, 12), round_to_integer=True))
    else:
        vars_.append(VariableSpec(OUTCOME, "dynamic", "continuous"))
    return Schema(vars_, outcome=OUTCOME, eurod_outcome=config.eurod_mode)


def _assign_treatment(index, n_treated, rng):
    # latent logistic index; the top n_treated are treated
    latent = index + rng.logistic(size=len(index))
    d = np.zeros(len(index), int)
    if n_treated:
        d[np.argsort(-latent, kind="stable")[:n_treated]] = 1
    return d


def simulate_panel(config):
    """Draw one panel and its ground-truth record."""
    rng = np.random.default_rng(config.seed)
    n = config.n_treated + config.n_control
    k = config.n_covariates
    taus = event_times(config.window)
    w = np.ones(k) / np.sqrt(k)

    z = rng.normal(size=(n, k))
    index = z @ w
    d = _assign_treatment(config.selection * index, config.n_treated, rng)
    alpha = config.unit_sd * rng.normal(size=n) + config.covariate_level * index
    lam = {t: float(v) for t, v in zip(taus, config.time_sd * rng.normal(size=len(taus)))}
    lam[-1] = 0.0
    effects = {t: a for t, a in enumerate(config.effects)}
    age0 = 70 + 8 * rng.normal(size=n) if config.include_age else None

    # monotone attrition from tau=1 on; tau=0 stays observed so every unit keeps a post row
    alive = np.ones(n, bool)
    frames = []
    for t in taus:
        if t >= 1 and config.attrition > 0:
            alive &= rng.random(n) >= config.attrition
        x = rng.normal(size=n)
        eps = config.noise_sd * rng.normal(size=n)
        y = (
            alpha
            + lam[t]
            + d * effects.get(t, 0.0)
            + config.gamma * x
            + config.slope_gap * d * t * (t < 0)
            + config.covariate_trend * index * t
            + eps
        )
        if config.eurod_mode:
            y = np.clip(np.floor(EURO_D_LEVEL + y + 0.5), 0, 12)
        block = {"unit": np.arange(n), "tau": t, "treated": d}
        for j, name in enumerate(covariate_names(k)):
            block[name] = z[:, j]
        if config.include_age:
            block["age"] = age0 + AGE_STEP * (t + 1)
        block["x"] = x
        block[OUTCOME] = y
        frames.append(pd.DataFrame(block)[alive])
    df = pd.concat(frames).sort_values(["unit", "tau"], kind="stable").reset_index(drop=True)
    panel = LongPanel(df, dgp_schema(config))
    truth = GroundTruth(
        config=config.to_dict(),
        effects=effects,
        time_effects=lam,
        selection_weights=(config.selection * w).tolist(),
        gamma=config.gamma,
        slope_gap=config.slope_gap,
        covariate_trend=config.covariate_trend,
        unit_effects={int(i): float(a) for i, a in enumerate(alpha)},
    )
    return panel, truth


SPARSE_DEFAULTS = dict(
    n_treated=40,
    n_control=160,
    n_covariates=8,
    selection=8.0,
    covariate_trend=0.15,
    unit_sd=0.3,
    noise_sd=0.3,
)


def sparse_confounded_config(seed=0, **overrides):
    """Small treated arm, many covariates, strong selection, covariate-driven trends."""
    params = dict(SPARSE_DEFAULTS, seed=seed)
    params.update(overrides)
    return DgpConfig(**params)


def simulate_sparse_confounded(config=None):
    if config is None:
        config = sparse_confounded_config()
    return simulate_panel(config)
