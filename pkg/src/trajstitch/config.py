"""Run configuration and seeded random streams."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class RunConfig:
    scenario: str = "disjoint-families"
    dataset: str | None = None
    n_per_family: int = 50
    horizon: int = 16
    diffusion_steps: int = 100
    delta: float = 2.0
    iterations: int = 200
    ratio: str = "4:1"
    gamma: float = 0.99
    low_quantile: float = 0.5
    high_quantile: float = 0.8
    min_keep: int = 5
    percentile: float = 0.2
    denoiser_hidden: list = field(default_factory=lambda: [128, 128, 128])
    denoiser_arch: str = "relative"
    denoiser_steps: int = 8000
    denoiser_batch: int = 32
    denoiser_lr: float = 3e-3
    denoiser_lr_decay: str = "cosine"
    aux_inv_hidden: list = field(default_factory=lambda: [128, 128])
    aux_dyn_hidden: list = field(default_factory=lambda: [128, 128, 128, 128])
    aux_steps: int = 3000
    aux_batch: int = 256
    bc_hidden: list = field(default_factory=lambda: [128, 128])
    bc_steps: int = 3000
    bc_tie_tol: float = 0.01
    batch_size: int = 256
    lr: float = 1e-3
    log_every: int = 100
    eval_seeds: int = 3
    eval_episodes: int = 1
    sweep_deltas: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])
    sweep_ratios: list = field(default_factory=lambda: ["0:1", "1:2", "1:1", "2:1", "4:1", "1:0"])
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.horizon >= 4, "horizon must be at least 4"),
            (self.diffusion_steps >= 2, "diffusion_steps must be at least 2"),
            (self.delta > 0, "delta must be positive"),
            (self.iterations >= 1, "iterations must be at least 1"),
            (0 < self.gamma <= 1, "gamma must lie in (0, 1]"),
            (0 < self.low_quantile <= self.high_quantile < 1, "need 0 < low_quantile <= high_quantile < 1"),
            (self.min_keep >= 2, "min_keep must be at least 2"),
            (0 < self.percentile <= 1, "percentile must lie in (0, 1]"),
            (self.bc_tie_tol >= 0, "bc_tie_tol must be nonnegative"),
            (self.n_per_family >= 1, "n_per_family must be positive"),
            (self.denoiser_arch in ("relative", "window"), "denoiser_arch must be relative or window"),
            (self.denoiser_lr_decay in ("cosine", "none"), "denoiser_lr_decay must be cosine or none"),
            (self.eval_seeds >= 1 and self.eval_episodes >= 1, "need at least one eval seed and episode"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for r in [self.ratio, *self.sweep_ratios]:
            parse_ratio(r)
        if any(d <= 0 for d in self.sweep_deltas):
            raise ConfigError("sweep deltas must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad config value: {e}") from None

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None

    def with_overrides(self, pairs):
        """Apply ``key=value`` strings; values parse as JSON, else as plain strings."""
        d = self.to_dict()
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            if key not in d:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                d[key] = json.loads(raw)
            except json.JSONDecodeError:
                d[key] = raw
        return RunConfig.from_dict(d)

    def hash(self):
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def parse_ratio(text):
    try:
        o, a = (float(x) for x in str(text).split(":"))
    except ValueError:
        raise ConfigError(f"ratio {text!r} is not of the form o:a") from None
    if o < 0 or a < 0 or o + a == 0:
        raise ConfigError(f"invalid ratio {text!r}")
    return o, a


def stream(seed, name):
    """Independent generator for a named stage, derived from the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
