"""Small dense networks with hand-written gradients.

Everything here is float64 numpy. An :class:`Mlp` is a stack of affine
layers with a GELU (tanh approximation) between them and a linear output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrainingError
from .io import atomic_write_text

CHECKPOINT_VERSION = 1

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    # x * x * x: np.power with a float exponent is ~70x slower
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


class Mlp:
    """Multilayer perceptron ``widths[0] -> ... -> widths[-1]``.

    ``params`` is the flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
    ``(fan_in, fan_out)`` so a batch ``x`` of shape ``(n, fan_in)`` maps to
    ``x @ W + b``.
    """

    def __init__(self, widths, params=None, activation="gelu", rng=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"bad layer widths {widths}")
        if activation not in ("gelu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            params = []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                bound = 1.0 / math.sqrt(fan_in)
                params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                params.append(np.zeros(fan_out))
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self._check_shapes()

    def _check_shapes(self):
        if len(self.params) != 2 * (len(self.widths) - 1):
            raise ValueError("parameter count does not match widths")
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if self.params[2 * i].shape != (fan_in, fan_out):
                raise ValueError(f"layer {i} weight has shape {self.params[2 * i].shape}")
            if self.params[2 * i + 1].shape != (fan_out,):
                raise ValueError(f"layer {i} bias has shape {self.params[2 * i + 1].shape}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def copy(self):
        return Mlp(self.widths, [p.copy() for p in self.params], self.activation)

    def _act(self, z):
        return gelu(z) if self.activation == "gelu" else z

    def _act_grad(self, z):
        return gelu_grad(z) if self.activation == "gelu" else np.ones_like(z)

    def forward(self, x, return_cache=False):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got shape {x.shape}")
        pre, post = [], []
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                h = self._act(z)
                if return_cache:
                    pre.append(z)
                    post.append(h)
            else:
                h = z
        out = h[0] if squeeze else h
        if return_cache:
            return out, (x, pre, post)
        return out

    __call__ = forward

    def backward(self, cache, grad_out):
        """Gradients of a scalar loss given ``dL/d(output)``.

        Returns ``(param_grads, grad_input)``.
        """
        x, pre, post = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != (x.shape[0], self.out_dim):
            raise ValueError(f"output gradient shape {g.shape} does not match forward pass")
        grads = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            h_in = x if i == 0 else post[i - 1]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                g = g * self._act_grad(pre[i - 1])
        return grads, g

    # checkpoint form

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "widths": self.widths,
            "activation": self.activation,
            "params": [p.tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        return cls(d["widths"], [np.array(p, dtype=np.float64) for p in d["params"]], d["activation"])


def mlp_forward(model, x):
    return model.forward(x)


def mlp_backward(model, x, grad_out):
    """Parameter gradients for the loss whose output-gradient is ``grad_out``."""
    _, cache = model.forward(x, return_cache=True)
    grads, _ = model.backward(cache, grad_out)
    return grads


def mse_loss(pred, target):
    """Mean over every element of the squared residual, plus its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, model, grads):
        """Apply one bias-corrected moment update to ``model`` in place."""
        if len(grads) != len(model.params):
            raise ValueError("gradient list does not match model parameters")
        for p, g in zip(model.params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient at optimizer step {self.step_count + 1}")
        if not self.m:
            self.m = [np.zeros_like(p) for p in model.params]
            self.v = [np.zeros_like(p) for p in model.params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(model.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return model


def optimizer_step(opt, model, grads):
    return opt.step(model, grads)


def finite_difference_grads(loss_fn, model, h=1e-5):
    """Central differences of ``loss_fn(model)`` for every parameter entry."""
    out = []
    for p in model.params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = loss_fn(model)
            flat[j] = old - h
            down = loss_fn(model)
            flat[j] = old
            gflat[j] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, abs_floor=1e-6):
    """Largest ``|a - n| / max(|a|, |n|, abs_floor)`` over all entries.

    The floor keeps near-zero gradients from turning finite-difference
    round-off into large relative errors.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
            worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


def fit_regression(model, inputs, targets, steps, batch_size, lr, rng, log_every=100):
    """Minibatch MSE regression with Adam. Returns the per-interval loss curve."""
    opt = Adam(lr=lr)
    n = inputs.shape[0]
    curve = []
    running = 0.0
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=min(batch_size, n))
        pred, cache = model.forward(inputs[idx], return_cache=True)
        loss, g = mse_loss(pred, targets[idx])
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        grads, _ = model.backward(cache, g)
        opt.step(model, grads)
        running += loss
        if step % log_every == 0:
            curve.append((step, running / log_every))
            running = 0.0
    return curve


def save_checkpoint(model, path, extra=None):
    d = model.to_dict()
    if extra:
        d["extra"] = extra
    atomic_write_text(path, json.dumps(d, sort_keys=True))


def load_checkpoint(path):
    d = json.loads(Path(path).read_text())
    return Mlp.from_dict(d), d.get("extra", {})
