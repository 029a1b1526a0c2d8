"""Minimal dense-network training infrastructure.

Hand-written forward/backward for small MLPs, an Adam optimizer and the
warm-up + step-decay learning-rate schedule.  Everything is deterministic:
reductions have a fixed order and parameters stay finite after every step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01

ACTIVATIONS = ("linear", "leaky_relu", "sigmoid")


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "leaky_relu":
        return np.where(z >= 0, z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        # split form avoids overflow in exp for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name: str, z: np.ndarray, a: np.ndarray, grad: np.ndarray):
    if name == "linear":
        return grad
    if name == "leaky_relu":
        return grad * np.where(z >= 0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return grad * a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


class DenseNet:
    """Chain of affine layers with per-layer activations.

    Parameters are stored as a flat list [W0, b0, W1, b1, ...]; weights have
    shape (fan_in, fan_out).
    """

    def __init__(self, widths, activations=None, rng=None, dtype=np.float32):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if activations is None:
            activations = ["leaky_relu"] * (len(widths) - 2) + ["linear"]
        if len(activations) != len(widths) - 1:
            raise ValueError("one activation per layer required")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        rng = rng or np.random.default_rng(0)
        self.widths = list(widths)
        self.activations = list(activations)
        self.dtype = dtype
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            bound = np.sqrt(6.0 / fan_in)  # Kaiming-uniform, fan-in scaling
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            b = np.zeros(fan_out, dtype=dtype)
            self.params += [w, b]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray):
        """Returns (output, cache); the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ValueError(
                f"expected input of shape (N, {self.widths[0]}), got {x.shape}"
            )
        pre, post = [], [x]
        h = x
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ w.astype(np.float64) + b.astype(np.float64)
            h = _act_forward(self.activations[i], z)
            pre.append(z)
            post.append(h)
        return h, (pre, post)

    def forward_only(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, grad_out: np.ndarray, cache):
        """Exact reverse-mode gradients.

        Returns (param_grads, grad_input); param_grads aligns with ``params``.
        """
        pre, post = cache
        if grad_out.shape != (post[0].shape[0], self.widths[-1]):
            raise ValueError("upstream gradient shape does not match cache")
        grads: list[np.ndarray] = [None] * len(self.params)
        g = np.asarray(grad_out, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            g = _act_backward(self.activations[i], pre[i], post[i + 1], g)
            w = self.params[2 * i]
            grads[2 * i] = post[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ w.astype(np.float64).T
        return grads, g

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.n_params:
            raise ValueError("parameter vector size mismatch")
        pos = 0
        for p in self.params:
            p[...] = vec[pos : pos + p.size].reshape(p.shape).astype(p.dtype)
            pos += p.size


@dataclass
class AdamState:
    """Per-parameter-array Adam accumulators."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    skipped: int = 0  # non-finite gradient events


class Adam:
    def __init__(self, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
        )

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        """One bias-corrected Adam update, in place."""
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        for g in grads:
            if not np.all(np.isfinite(g)):
                self.state.skipped += 1
                return
        s = self.state
        s.step += 1
        c1 = 1.0 - self.beta1**s.step
        c2 = 1.0 - self.beta2**s.step
        for p, m, v, g in zip(self.params, s.m, s.v, grads):
            g = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype)


DECAY_FACTOR = 0.33
DECAY_FRACTIONS = (0.45, 0.60, 0.75, 0.85, 0.95)
WARMUP_FRACTION = 0.05


def lr_schedule(iteration: int, total_iters: int, base_lr: float = 0.01) -> float:
    """Linear warm-up over the first 5% of iterations, then 0.33x decays at
    the 45/60/75/85/95% marks."""
    if not 0 <= iteration < total_iters:
        raise ValueError("iteration out of range")
    warmup = max(1, round(WARMUP_FRACTION * total_iters))
    ramp = min(1.0, iteration / warmup)
    decays = sum(iteration >= int(f * total_iters) for f in DECAY_FRACTIONS)
    return base_lr * ramp * DECAY_FACTOR**decays
