"""Conditional WGAN-GP over trajectories, conditioned on fixed skeletons.

The generator maps ``[noise, encoded skeleton]`` to an encoded trajectory
block; the critic scores ``[encoded trajectory, encoded skeleton]``. At
sampling time skeletons are bootstrap draws of real rows, so the static block
of every synthetic unit is an exact copy of a real one.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import torch
from torch import nn

from panelsynth import panel as pn
from panelsynth.encoder import (
    EncodedMatrix,
    ModeModel,
    TableEncoder,
    build_encoder,
    decode,
    encode,
    fit_encoder,
)
from panelsynth.errors import ConditioningError, ConfigError, DataError, DivergenceError, StageError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "panelsynth-generator/1"
GUMBEL_TAU = 0.2


@dataclass
class GenConfig:
    noise_dim: int = 32
    hidden_widths: tuple = (256, 256)
    critic_steps_per_gen_step: int = 5
    gradient_penalty_weight: float = 10.0
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    batch_size: int = 64
    epochs: int = 300
    seed: int = 0
    max_modes: int = 10
    ema_decay: float = 0.999

    def __post_init__(self):
        self.hidden_widths = tuple(int(h) for h in self.hidden_widths)
        counts = {
            "noise_dim": self.noise_dim,
            "critic_steps_per_gen_step": self.critic_steps_per_gen_step,
            "batch_size": self.batch_size,
            "max_modes": self.max_modes,
        }
        for k, v in counts.items():
            if int(v) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ConfigError("hidden_widths must be non-empty positive counts")
        if self.gradient_penalty_weight < 0:
            raise ConfigError("gradient_penalty_weight must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown generator option(s) {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


def _mlp(n_in, widths, n_out, act):
    layers = []
    for w in widths:
        layers += [nn.Linear(n_in, w), act()]
        n_in = w
    layers.append(nn.Linear(n_in, n_out))
    return nn.Sequential(*layers)


class Generator(nn.Module):
    def __init__(self, noise_dim, cond_dim, widths, out_layout):
        super().__init__()
        self.net = _mlp(noise_dim + cond_dim, widths, out_layout[-1][1] if out_layout else 0, nn.ReLU)
        self.out_layout = out_layout

    def forward(self, z, cond, hard_tau=None, generator=None):
        raw = self.net(torch.cat([z, cond], dim=1))
        parts = []
        for kind, stop, start in self.out_layout:
            if kind == "alpha":
                parts.append(torch.tanh(raw[:, start:stop]))
            elif hard_tau is not None:
                u = torch.rand(raw[:, start:stop].shape, generator=generator, dtype=raw.dtype)
                g = -torch.log((-torch.log(u.clamp_min(1e-10))).clamp_min(1e-10))
                parts.append(torch.softmax((raw[:, start:stop] + g) / hard_tau, dim=1))
            else:
                parts.append(torch.softmax(raw[:, start:stop], dim=1))
        return torch.cat(parts, dim=1)


def _activation_layout(layout, offset):
    """(kind, stop, start) triples for the generator's output activations."""
    out = []
    for lay in layout:
        s = lay.start - offset
        if lay.kind == "numeric":
            out.append(("alpha", s + 1, s))
            out.append(("softmax", lay.stop - offset, s + 1))
        else:
            out.append(("softmax", lay.stop - offset, s))
    return out


def make_critic(in_dim, widths):
    return _mlp(in_dim, widths, 1, lambda: nn.LeakyReLU(0.2))


def gradient_penalty(critic, real, fake, eps):
    """Mean of (||grad_x critic(x_hat)|| - 1)^2 at interpolates x_hat.

    ``real``/``fake`` are full critic inputs; ``eps`` has shape (n, 1).
    """
    x_hat = (eps * real + (1 - eps) * fake).requires_grad_(True)
    out = critic(x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    return ((grad.norm(2, dim=1) - 1.0) ** 2).mean()


@dataclass
class GeneratorModel:
    config: GenConfig
    encoder: TableEncoder
    template: pn.WideTable
    generator: Generator
    critic: nn.Module
    training_log: list = field(default_factory=list)

    @property
    def cond_dim(self):
        return self.encoder.skeleton_width

    @property
    def out_dim(self):
        return self.encoder.width - self.encoder.skeleton_width

    def parameter_vector(self):
        with torch.no_grad():
            return torch.cat(
                [p.flatten() for p in list(self.generator.parameters()) + list(self.critic.parameters())]
            ).numpy().copy()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(checkpoint_json(self))


def _derive_seed(*keys):
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def _encode_skeleton(model_encoder, wide):
    enc = encode(wide, model_encoder, columns=range(wide.n_skeleton), sample_modes=False)
    return enc.values


def _build_networks(config, cond_dim, out_dim, act_layout):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_derive_seed(config.seed, 1))
        gen = Generator(config.noise_dim, cond_dim, config.hidden_widths, act_layout)
        critic = make_critic(out_dim + cond_dim, config.hidden_widths)
    return gen, critic


def _check_finite(modules, epoch):
    for m in modules:
        for p in m.parameters():
            if not torch.isfinite(p).all():
                raise DivergenceError(f"non-finite parameters at epoch {epoch}", epoch=epoch)


def train(wide_real, schema, config, encoder=None):
    """Fit a conditional WGAN-GP on one arm's wide table."""
    n = wide_real.n_rows
    batch = config.batch_size
    if config.epochs > 0 and n < 2 * batch:
        raise DataError(f"{n} real rows is fewer than 2 x batch_size ({batch})")
    if encoder is None:
        encoder = fit_encoder(wide_real, max_modes=config.max_modes, seed=_derive_seed(config.seed, 2))
    cond_np = _encode_skeleton(encoder, wide_real)
    full = encode(wide_real, encoder, seed=_derive_seed(config.seed, 3))
    traj_np = full.values[:, encoder.skeleton_width :]
    act_layout = _activation_layout(encoder.layout[wide_real.n_skeleton :], encoder.skeleton_width)
    gen, critic = _build_networks(config, cond_np.shape[1], traj_np.shape[1], act_layout)
    model = GeneratorModel(config, encoder, wide_real.rows(np.arange(0)), gen, critic)
    if config.epochs == 0:
        return model

    rng = torch.Generator().manual_seed(_derive_seed(config.seed, 4))
    cond = torch.tensor(cond_np, dtype=torch.float32)
    traj = torch.tensor(traj_np, dtype=torch.float32)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=betas)
    opt_c = torch.optim.Adam(critic.parameters(), lr=config.learning_rate, betas=betas)
    steps = max(n // batch, 1)
    lam = config.gradient_penalty_weight
    # sampling uses an exponential moving average of the generator weights
    ema = [p.detach().clone() for p in gen.parameters()]
    n_updates = 0

    def fake_batch(size, hard=True):
        idx = torch.randint(n, (size,), generator=rng)
        c = cond[idx]
        z = torch.randn(size, config.noise_dim, generator=rng)
        y = gen(z, c, hard_tau=GUMBEL_TAU if hard else None, generator=rng)
        return torch.cat([y, c], dim=1)

    for epoch in range(config.epochs):
        c_losses, g_losses = [], []
        for _ in range(steps):
            for _ in range(config.critic_steps_per_gen_step):
                idx = torch.randint(n, (batch,), generator=rng)
                real = torch.cat([traj[idx], cond[idx]], dim=1)
                with torch.no_grad():
                    fake = fake_batch(batch)
                eps = torch.rand(batch, 1, generator=rng)
                w_gap = critic(real).mean() - critic(fake).mean()
                loss_c = -w_gap + lam * gradient_penalty(critic, real, fake, eps)
                if not torch.isfinite(loss_c):
                    raise DivergenceError(f"critic loss is not finite at epoch {epoch}", epoch=epoch)
                opt_c.zero_grad()
                loss_c.backward()
                opt_c.step()
                c_losses.append(loss_c.item())
            loss_g = -critic(fake_batch(batch)).mean()
            if not torch.isfinite(loss_g):
                raise DivergenceError(f"generator loss is not finite at epoch {epoch}", epoch=epoch)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            g_losses.append(loss_g.item())
            _check_finite((gen, critic), epoch)
            n_updates += 1
            # warm-up keeps the initial weights from dominating short runs
            decay = min(config.ema_decay, (1 + n_updates) / (10 + n_updates))
            with torch.no_grad():
                for e, p in zip(ema, gen.parameters()):
                    e.mul_(decay).add_(p, alpha=1 - decay)
        model.training_log.append(
            {"epoch": epoch, "critic_loss": float(np.mean(c_losses)), "generator_loss": float(np.mean(g_losses))}
        )
    with torch.no_grad():
        for e, p in zip(ema, gen.parameters()):
            p.copy_(e)
    return model


def sample_skeletons(real_skeletons, n_target, seed=0):
    """Uniform bootstrap of skeleton rows (exact copies)."""
    real = np.asarray(real_skeletons, float)
    if n_target == 0:
        return real[:0].copy()
    if len(real) == 0:
        raise DataError("cannot resample from an empty skeleton set")
    idx = np.random.default_rng(seed).integers(len(real), size=n_target)
    return real[idx].copy()


def generate(model, skeletons, seed=0):
    """Trajectory matrix (raw units, sentinels for unobserved cells)."""
    skel = np.asarray(skeletons, float)
    tmpl = model.template
    n_traj = tmpl.width - tmpl.n_skeleton
    if skel.ndim != 2 or skel.shape[1] != tmpl.n_skeleton:
        raise ConditioningError(
            f"skeleton width {skel.shape[-1] if skel.ndim == 2 else skel.shape} != {tmpl.n_skeleton}"
        )
    if len(skel) == 0:
        return np.empty((0, n_traj))
    filler = np.tile(tmpl.sentinels[tmpl.n_skeleton :], (len(skel), 1))
    wide = tmpl.replace(values=np.hstack([skel, filler]), unit_ids=np.arange(len(skel)))
    cond = torch.tensor(_encode_skeleton(model.encoder, wide), dtype=torch.float32)
    rng = torch.Generator().manual_seed(int(seed) % (2**63))
    with torch.no_grad():
        z = torch.randn(len(skel), model.config.noise_dim, generator=rng)
        out = model.generator(z, cond).numpy().astype(float)
    enc = model.encoder
    layout = enc.layout[tmpl.n_skeleton :]
    decoded = decode(EncodedMatrix(out, layout, tmpl.n_skeleton), enc, tmpl)
    return np.asarray(decoded)


def augment(real_long, schema, config, n_target_per_arm, window=pn.DEFAULT_WINDOW, models=None):
    """Synthesize ``n_target_per_arm`` new units per treatment arm.

    ``n_target_per_arm`` is a count applied to both arms or a mapping from
    arm (0, 1) to count. Returns only synthetic units (flagged ``synthetic``), with fresh integer
    ids following the largest real id. ``models`` may be passed a dict to
    collect the trained per-arm models.
    """
    stage = "to_wide"
    try:
        wide = pn.to_wide(real_long, window)
        bounds = pn.empirical_bounds(real_long)
        treat = wide.treatment
        ids = real_long.units
        next_id = int(np.max(ids)) + 1 if len(ids) and np.issubdtype(np.asarray(ids).dtype, np.number) else 0
        frames = []
        targets = n_target_per_arm if isinstance(n_target_per_arm, dict) else {0: n_target_per_arm, 1: n_target_per_arm}
        for arm in (0, 1):
            rows = np.flatnonzero(treat == arm)
            n_target = int(targets.get(arm, 0))
            if n_target == 0 or len(rows) == 0:
                continue
            arm_wide = wide.rows(rows)
            arm_cfg = GenConfig(**{**config.to_dict(), "seed": _derive_seed(config.seed, 100 + arm)})
            stage = "train"
            model = train(arm_wide, schema, arm_cfg)
            if models is not None:
                models[arm] = model
            stage = "sample_skeletons"
            skel = sample_skeletons(arm_wide.skeleton, n_target, seed=_derive_seed(config.seed, 200 + arm))
            stage = "generate"
            traj = generate(model, skel, seed=_derive_seed(config.seed, 300 + arm))
            stage = "inject"
            synth = pn.recombine(skel, traj, arm_wide, unit_ids=np.arange(next_id, next_id + n_target))
            next_id += n_target
            stage = "to_long_with_rules"
            long = pn.to_long_with_rules(synth, schema)
            stage = "clamp_domains"
            long = pn.clamp_domains(long, schema, bounds)
            frames.append(long.data)
        stage = "concatenate"
        if frames:
            data = pd.concat(frames, ignore_index=True)
        else:
            data = pd.DataFrame({c: pd.Series(dtype=float) for c in schema.columns})
        data[pn.SYNTHETIC_FLAG] = True
        return pn.LongPanel(data, schema)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


def checkpoint_json(model):
    tmpl = model.template
    params = {}
    for prefix, module in (("generator", model.generator), ("critic", model.critic)):
        for name, p in module.state_dict().items():
            params[f"{prefix}.{name}"] = {"shape": list(p.shape), "data": p.flatten().tolist()}
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "schema": tmpl.schema.to_dict(),
        "window": list(tmpl.window),
        "columns": list(tmpl.columns),
        "n_skeleton": tmpl.n_skeleton,
        "sentinels": [None if np.isnan(s) else float(s) for s in tmpl.sentinels],
        "encoder": model.encoder.to_dict(),
        "training_log": model.training_log,
        "parameters": params,
    }
    return json.dumps(doc)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')!r}")
    config = GenConfig.from_dict(doc["config"])
    schema = pn.Schema.from_dict(doc["schema"])
    sentinels = np.array([np.nan if s is None else s for s in doc["sentinels"]], float)
    tmpl = pn.WideTable(
        np.empty((0, len(doc["columns"]))), np.empty(0), tuple(doc["columns"]), doc["n_skeleton"],
        tuple(doc["window"]), sentinels, schema,
    )
    mm = {k: ModeModel.from_dict(d) for k, d in doc["encoder"]["mode_models"].items()}
    cats = {k: tuple(v) for k, v in doc["encoder"]["categories"].items()}
    encoder = build_encoder(tmpl, mm, cats)
    act_layout = _activation_layout(encoder.layout[tmpl.n_skeleton :], encoder.skeleton_width)
    gen, critic = _build_networks(config, encoder.skeleton_width, encoder.width - encoder.skeleton_width, act_layout)
    for prefix, module in (("generator", gen), ("critic", critic)):
        state = {}
        for name, ref in module.state_dict().items():
            entry = doc["parameters"][f"{prefix}.{name}"]
            state[name] = torch.tensor(entry["data"], dtype=ref.dtype).reshape(entry["shape"])
        module.load_state_dict(state)
    return GeneratorModel(config, encoder, tmpl, gen, critic, doc["training_log"])
