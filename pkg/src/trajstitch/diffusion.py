"""Masked conditional diffusion over fixed-length state windows.

All arrays in this module are in normalized state space. A window has
shape ``(H, d)``; batched windows ``(n, H, d)``; observed flags ``(H,)`` or
``(n, H)`` booleans. Diffusion steps run ``k = 1..K``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, TrainingError
from .io import atomic_write_text
from .nn import Adam, Mlp, mse_loss

COSINE_OFFSET = 0.008
ALPHA_MIN, ALPHA_MAX = 0.001, 0.9999


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha[k]`` and ``alpha_bar[k]`` for ``k = 1..K``; index 0 is the clean level."""

    K: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    offset: float = COSINE_OFFSET


def build_cosine_schedule(K, offset=COSINE_OFFSET):
    if K < 2:
        raise ConfigError(f"need at least 2 diffusion steps, got {K}")
    k = np.arange(K + 1, dtype=np.float64)
    f = np.cos((k / K + offset) / (1.0 + offset) * math.pi / 2) ** 2
    ratio = (f[1:] / f[0]) / (f[:-1] / f[0])
    alpha = np.empty(K + 1)
    alpha[0] = 1.0
    alpha[1:] = np.clip(ratio, ALPHA_MIN, ALPHA_MAX)
    # recomputed from the clipped alphas so alpha_bar[k] = alpha_bar[k-1] * alpha[k] holds
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(K, alpha, alpha_bar, offset)


def forward_noise(window, k, epsilon, schedule):
    if not 1 <= k <= schedule.K:
        raise ValueError(f"diffusion step {k} outside [1, {schedule.K}]")
    ab = schedule.alpha_bar[k]
    return math.sqrt(ab) * np.asarray(window) + math.sqrt(1.0 - ab) * np.asarray(epsilon)


@dataclass
class MaskedWindow:
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.ndim != 2 or self.observed.shape != (self.values.shape[0],):
            raise ValueError("values must be (H, d) with one observed flag per row")
        if not self.observed.any():
            raise ValueError("window needs at least one observed position")
        if not np.all(np.isfinite(self.values[self.observed])):
            raise ValueError("observed values must be finite")

    @property
    def horizon(self):
        return self.values.shape[0]

    def condition(self):
        """Observed values with masked rows zeroed."""
        return np.where(self.observed[:, None], self.values, 0.0)


def make_training_mask(H, rng, intervals=None):
    """Observed flags with two disjoint masked intervals.

    Index 0 is always observed, the last index is always masked, and at least
    one observed index separates the two intervals. ``intervals`` (0-based,
    inclusive ``(start, stop)`` pairs) bypasses the draw.
    """
    if H < 4:
        raise ConfigError(f"horizon must be at least 4, got {H}")
    observed = np.ones(H, dtype=bool)
    if intervals is None:
        len2 = int(rng.integers(1, min(H // 2, H - 3) + 1))
        avail = H - len2 - 2
        len1 = int(rng.integers(1, min(H // 2, avail) + 1))
        start1 = int(rng.integers(1, avail - len1 + 2))
        intervals = [(start1, start1 + len1 - 1), (H - len2, H - 1)]
    for a, b in intervals:
        observed[a : b + 1] = False
    return observed


def step_features(k, K, n):
    t = k / K
    return np.tile([t, t * t], (n, 1)) if np.ndim(k) == 0 else np.stack([t, t * t], axis=1)


ARCHITECTURES = ("relative", "window")


@dataclass
class DenoiserModel:
    """Noise predictor for state windows.

    Every position carries the channels noisy value, condition value,
    observed flag. Observed rows reach the network through the condition
    only (their noisy channel is zeroed), so training, where those rows hold
    noised values, and sampling, where they hold clean replaced values, look
    the same to it.

    ``arch="relative"`` runs one shared network per position. Its input is
    the whole window indexed by offset ``j - i`` from that position
    (``2H - 1`` slots, zero padded, plus an inside-window flag), so what it
    learns about "an observed state three steps ahead" applies at every
    position. This matters because training masks always hide the last row,
    yet stitch masks observe it. ``arch="window"`` is a single network on the
    flattened window; weights attached to the last row's condition never
    receive a gradient there.

    With ``anchored`` set, windows are expressed relative to their first
    state ``a`` (always observed): the noisy window enters as
    ``x_k - sqrt(alpha_bar_k) * a``, the condition as ``cond - a`` on observed
    rows, and ``a`` itself is appended. Since ``x_k - sqrt(alpha_bar_k) * a``
    is exactly the noised version of ``x_0 - a`` with the same noise, the
    network sees the same diffusion, just translated.

    With ``skip`` set, the noise estimate is
    ``sqrt(1 - alpha_bar_k) * x_k + sqrt(alpha_bar_k) * g`` with ``g`` the
    network output (``x_k`` taken relative to the anchor when anchored). The
    exact noise has this form with ``g = sqrt(alpha_bar_k) * eps -
    sqrt(1 - alpha_bar_k) * x_0``, so nothing is lost, while network errors
    are damped by ``sqrt(alpha_bar_k)`` at high noise levels, where the
    reverse update divides by the small ``sqrt(alpha_k)``.
    """

    mlp: Mlp
    horizon: int
    state_dim: int
    anchored: bool = True
    skip: bool = True
    arch: str = "relative"
    loss_curve: list = field(default_factory=list)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown denoiser architecture {self.arch!r}")

    @staticmethod
    def input_width(H, d, anchored=True, arch="relative"):
        extra = 2 + (d if anchored else 0)
        if arch == "relative":
            return (2 * H - 1) * (2 * d + 2) + extra
        return 2 * H * d + H + extra

    @classmethod
    def create(cls, H, d, hidden, rng, anchored=True, skip=True, arch="relative"):
        out = d if arch == "relative" else H * d
        widths = [cls.input_width(H, d, anchored, arch), *hidden, out]
        return cls(Mlp(widths, rng=rng), H, d, anchored, skip, arch)

    def relative(self, noisy, cond, alpha_bar_k):
        if not self.anchored:
            return noisy
        return noisy - np.sqrt(np.reshape(alpha_bar_k, (-1, 1, 1))) * cond[:, :1, :]

    def output_scales(self, noisy, cond, alpha_bar_k):
        """``(offset, gain)`` with ``eps_hat = offset + gain * g``, flattened per window."""
        n = noisy.shape[0]
        if not self.skip:
            return 0.0, 1.0
        ab = np.reshape(alpha_bar_k, (-1, 1)) * np.ones((n, 1))
        rel = self.relative(noisy, cond, alpha_bar_k).reshape(n, -1)
        return np.sqrt(1.0 - ab) * rel, np.sqrt(ab)

    def features(self, noisy, cond, observed, k, K, alpha_bar_k):
        n, H, _ = noisy.shape
        glob = [step_features(k, K, n)]
        if self.anchored:
            anchor = cond[:, :1, :]
            noisy = self.relative(noisy, cond, alpha_bar_k)
            cond = np.where(observed[:, :, None], cond - anchor, 0.0)
            glob.append(anchor.reshape(n, -1))
        noisy = np.where(observed[:, :, None], 0.0, noisy)
        glob = np.concatenate(glob, axis=1)
        if self.arch == "window":
            return np.concatenate(
                [noisy.reshape(n, -1), cond.reshape(n, -1), observed.astype(np.float64), glob], axis=1
            )
        per = np.concatenate([noisy, cond, observed[:, :, None], np.ones((n, H, 1))], axis=2)
        padded = np.zeros((n, 3 * H - 2, per.shape[2]))
        padded[:, H - 1 : 2 * H - 1] = per
        # slot m of position i holds window row i + m - (H - 1)
        win = np.lib.stride_tricks.sliding_window_view(padded, 2 * H - 1, axis=1)
        rows = win.transpose(0, 1, 3, 2).reshape(n * H, -1)
        return np.concatenate([rows, np.repeat(glob, H, axis=0)], axis=1)

    def network(self, x, n, return_cache=False):
        """Raw network output reshaped to one row per window."""
        if return_cache:
            out, cache = self.mlp.forward(x, return_cache=True)
            return out.reshape(n, -1), cache
        return self.mlp.forward(x).reshape(n, -1)

    def predict(self, noisy, cond, observed, k, schedule):
        ab = schedule.alpha_bar[k]
        x = self.features(noisy, cond, observed, k, schedule.K, ab)
        offset, gain = self.output_scales(noisy, cond, ab)
        return (offset + gain * self.network(x, len(noisy))).reshape(noisy.shape)


def denoiser_loss(model, windows, observed, k, eps, schedule):
    """Noise-prediction MSE and parameter gradients for one batch.

    ``k`` is an int array with one diffusion step per window.
    """
    ab = schedule.alpha_bar[k][:, None, None]
    noisy = np.sqrt(ab) * windows + np.sqrt(1.0 - ab) * eps
    cond = np.where(observed[:, :, None], windows, 0.0)
    x = model.features(noisy, cond, observed, k, schedule.K, schedule.alpha_bar[k])
    n = len(windows)
    out, cache = model.network(x, n, return_cache=True)
    offset, gain = model.output_scales(noisy, cond, schedule.alpha_bar[k])
    loss, g = mse_loss(offset + gain * out, eps.reshape(n, -1))
    grads, _ = model.mlp.backward(cache, (gain * g).reshape(-1, model.mlp.out_dim))
    return loss, grads


@dataclass
class DenoiserConfig:
    horizon: int = 32
    hidden: tuple = (256, 256, 256)
    anchored: bool = True
    skip: bool = True
    arch: str = "relative"
    steps: int = 5000
    batch_size: int = 32
    lr: float = 3e-3
    lr_decay: str = "cosine"
    log_every: int = 100

    def lr_at(self, step):
        """Learning rate for 1-based ``step``; ``cosine`` anneals to zero over ``steps``."""
        if self.lr_decay == "none":
            return self.lr
        if self.lr_decay == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * (step - 1) / self.steps))
        raise ConfigError(f"unknown learning-rate decay {self.lr_decay!r}")


def extract_windows(states_list, H):
    windows = []
    skipped = 0
    for states in states_list:
        if len(states) < H:
            skipped += 1
            continue
        for i in range(len(states) - H + 1):
            windows.append(states[i : i + H])
    if skipped:
        warnings.warn(f"skipped {skipped} trajectories shorter than horizon {H}")
    if not windows:
        raise ConfigError(f"no trajectory has at least {H} steps")
    return np.stack(windows)


def train_denoiser(dataset, schedule, config, rng):
    """Fit the noise predictor on normalized state windows of ``dataset``.

    ``dataset.norm_stats`` must be set.
    """
    if dataset.norm_stats is None:
        raise ConfigError("dataset needs normalization stats before denoiser training")
    H = config.horizon
    windows = extract_windows([dataset.norm_stats.normalize(t.states) for t in dataset], H)
    model = DenoiserModel.create(H, dataset.state_dim, config.hidden, rng, config.anchored, config.skip, config.arch)
    opt = Adam(lr=config.lr)
    running = 0.0
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(windows), size=config.batch_size)
        batch = windows[idx]
        observed = np.stack([make_training_mask(H, rng) for _ in range(config.batch_size)])
        k = rng.integers(1, schedule.K + 1, size=config.batch_size)
        eps = rng.standard_normal(batch.shape)
        loss, grads = denoiser_loss(model, batch, observed, k, eps, schedule)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite denoiser loss at step {step}")
        opt.lr = config.lr_at(step)
        opt.step(model.mlp, grads)
        running += loss
        if step % config.log_every == 0:
            model.loss_curve.append((step, running / config.log_every))
            running = 0.0
    return model


def sample_conditional_batch(model, schedule, values, observed, rng):
    """Reverse diffusion with hard replacement of observed entries after every step."""
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    obs3 = np.broadcast_to(observed[:, :, None], values.shape)
    cond = np.where(obs3, values, 0.0)
    x = rng.standard_normal(values.shape)
    x[obs3] = values[obs3]
    for k in range(schedule.K, 0, -1):
        a, ab = schedule.alpha[k], schedule.alpha_bar[k]
        eps_hat = model.predict(x, cond, observed, k, schedule)
        x = (x - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
        if k > 1:
            x = x + math.sqrt(1.0 - a) * rng.standard_normal(values.shape)
        x[obs3] = values[obs3]
    return x


def sample_conditional(model, schedule, masked, rng):
    if masked.horizon != model.horizon:
        raise ValueError(f"window length {masked.horizon} != model horizon {model.horizon}")
    if masked.observed.all():
        return masked.values.copy()
    out = sample_conditional_batch(model, schedule, masked.values[None], masked.observed[None], rng)
    return out[0]


def imagine_rollout(model, schedule, start_state, rng):
    """Sample ``H`` states whose first entry is ``start_state``; nothing else is conditioned."""
    H, d = model.horizon, model.state_dim
    values = np.zeros((H, d))
    values[0] = start_state
    observed = np.zeros(H, dtype=bool)
    observed[0] = True
    return sample_conditional(model, schedule, MaskedWindow(values, observed), rng)


def save_denoiser(model, schedule, path):
    d = model.mlp.to_dict()
    d["extra"] = {
        "horizon": model.horizon,
        "state_dim": model.state_dim,
        "anchored": model.anchored,
        "skip": model.skip,
        "arch": model.arch,
        "K": schedule.K,
        "offset": schedule.offset,
    }
    atomic_write_text(path, json.dumps(d, sort_keys=True))


def load_denoiser(path):
    d = json.loads(Path(path).read_text())
    extra = d["extra"]
    model = DenoiserModel(Mlp.from_dict(d), extra["horizon"], extra["state_dim"], extra["anchored"], extra["skip"], extra["arch"])
    return model, build_cosine_schedule(extra["K"], extra["offset"])
