"""Inverse dynamics, reward and forward dynamics regressors.

States enter every network normalized with the dataset's ``NormStats``;
actions and rewards stay in raw units. The forward model predicts the next
state in normalized space and :meth:`ForwardDynamicsModel.predict` maps it
back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NormStats
from .errors import ConfigError
from .io import atomic_write_text
from .nn import Mlp, fit_regression, mse_loss


@dataclass
class AuxConfig:
    inv_hidden: tuple = (256, 256)
    dyn_hidden: tuple = (256, 256, 256, 256)
    steps: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    val_fraction: float = 0.1
    log_every: int = 100


def _rows(x, width, name):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != width:
        raise ValueError(f"{name} has width {x.shape[1]}, expected {width}")
    return x, single


@dataclass
class _Regressor:
    mlp: Mlp
    norm: NormStats
    loss_curve: list = field(default_factory=list)
    val_loss: float = float("nan")

    kind = ""

    @property
    def state_dim(self):
        return self.norm.mean.shape[0]

    def save(self, path):
        d = self.mlp.to_dict()
        d["extra"] = {"kind": self.kind, "norm": self.norm.to_dict(), "val_loss": self.val_loss}
        atomic_write_text(path, json.dumps(d, sort_keys=True))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        extra = d["extra"]
        if extra["kind"] != cls.kind:
            raise ValueError(f"{path} holds a {extra['kind']!r} model, not {cls.kind!r}")
        return cls(Mlp.from_dict(d), NormStats.from_dict(extra["norm"]), val_loss=extra["val_loss"])


class InverseDynamicsModel(_Regressor):
    kind = "inv_dyn"

    def inputs(self, s, s_next):
        return np.concatenate([self.norm.normalize(s), self.norm.normalize(s_next)], axis=1)

    def predict(self, s, s_next):
        s, single = _rows(s, self.state_dim, "state")
        s_next, _ = _rows(s_next, self.state_dim, "next state")
        out = self.mlp.forward(self.inputs(s, s_next))
        return out[0] if single else out


class RewardModel(_Regressor):
    kind = "reward"

    def inputs(self, s, a):
        return np.concatenate([self.norm.normalize(s), a], axis=1)

    def predict(self, s, a):
        s, single = _rows(s, self.state_dim, "state")
        a, _ = _rows(a, self.mlp.in_dim - self.state_dim, "action")
        out = self.mlp.forward(self.inputs(s, a))[:, 0]
        return float(out[0]) if single else out


class ForwardDynamicsModel(_Regressor):
    kind = "fwd_dyn"

    def inputs(self, s, a):
        return np.concatenate([self.norm.normalize(s), a], axis=1)

    def predict_normalized(self, s, a):
        s, _ = _rows(s, self.state_dim, "state")
        a, _ = _rows(a, self.mlp.in_dim - self.state_dim, "action")
        return self.mlp.forward(self.inputs(s, a))

    def predict(self, s, a):
        single = np.ndim(s) == 1
        out = self.norm.denormalize(self.predict_normalized(s, a))
        return out[0] if single else out


def predict_action(model, s, s_next):
    return model.predict(s, s_next)


def predict_reward(model, s, a):
    return model.predict(s, a)


def predict_next_state(model, s, a):
    return model.predict(s, a)


@dataclass
class AuxModels:
    inv_dyn: InverseDynamicsModel
    reward: RewardModel
    fwd_dyn: ForwardDynamicsModel

    def save(self, directory):
        directory = Path(directory)
        self.inv_dyn.save(directory / "inv_dyn.json")
        self.reward.save(directory / "reward.json")
        self.fwd_dyn.save(directory / "fwd_dyn.json")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        return cls(
            InverseDynamicsModel.load(directory / "inv_dyn.json"),
            RewardModel.load(directory / "reward.json"),
            ForwardDynamicsModel.load(directory / "fwd_dyn.json"),
        )


def _fit(model, x, y, config, rng):
    n = len(x)
    perm = rng.permutation(n)
    n_val = int(round(config.val_fraction * n)) if n >= 10 else 0
    val, train = perm[:n_val], perm[n_val:]
    model.loss_curve = fit_regression(
        model.mlp, x[train], y[train], config.steps, config.batch_size, config.lr, rng, config.log_every
    )
    if n_val:
        model.val_loss, _ = mse_loss(model.mlp.forward(x[val]), y[val])
    return model


def train_aux_models(dataset, config, rng, norm=None):
    """Fit all three regressors on every consecutive transition of ``dataset``.

    A trajectory's final tuple has no successor and is left out, so a reward
    earned only on the last step is never seen by the reward model.
    """
    norm = norm or dataset.norm_stats
    if norm is None:
        raise ConfigError("normalization stats required")
    s, a, r, s2 = dataset.transitions()
    if len(s) == 0:
        raise ConfigError("dataset has no transitions")
    d_s, d_a = dataset.state_dim, dataset.action_dim
    inv = InverseDynamicsModel(Mlp([2 * d_s, *config.inv_hidden, d_a], rng=rng), norm)
    rew = RewardModel(Mlp([d_s + d_a, *config.dyn_hidden, 1], rng=rng), norm)
    fwd = ForwardDynamicsModel(Mlp([d_s + d_a, *config.dyn_hidden, d_s], rng=rng), norm)
    _fit(inv, inv.inputs(s, s2), a, config, rng)
    _fit(rew, rew.inputs(s, a), r[:, None], config, rng)
    _fit(fwd, fwd.inputs(s, a), norm.normalize(s2), config, rng)
    return AuxModels(inv, rew, fwd)
