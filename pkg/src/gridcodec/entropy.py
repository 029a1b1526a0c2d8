"""Differentiable bit-consumption estimation under a Bernoulli sign model.

A sign value costs -log2(p) bits when it is +1 and -log2(1-p) bits when it is
-1, where p is the predicted probability of +1.  Both closed-form partial
derivatives are implemented so training never relies on autodiff.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# probability clamp; keeps code lengths finite and the coder stable
EPS_P = 1e-6

_LN2 = np.log(2.0)


def clamp_probability(p: np.ndarray) -> np.ndarray:
    return np.clip(p, EPS_P, 1.0 - EPS_P)


def _check(p, theta):
    p = np.asarray(p, dtype=np.float64)
    theta = np.asarray(theta)
    if p.size and (p.min() < EPS_P or p.max() > 1.0 - EPS_P):
        raise ValueError("probability outside the clamp range")
    if theta.size and not np.all(np.abs(theta) == 1):
        raise ValueError("theta values must be +1 or -1")
    return p, theta.astype(np.float64)


def bit_estimate(p: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Bits needed to code sign theta at probability p = P(theta = +1)."""
    p, theta = _check(p, theta)
    return -(
        (1.0 + theta) / 2.0 * np.log2(p) + (1.0 - theta) / 2.0 * np.log2(1.0 - p)
    )


def bit_gradients(p: np.ndarray, theta: np.ndarray):
    """Closed-form partials (d bit / d theta, d bit / d p).

    The theta partial is independent of theta's value; the p partial switches
    branch with the sign being coded.
    """
    p, theta = _check(p, theta)
    d_theta = 0.5 * np.log2(1.0 / p - 1.0)
    d_p = np.where(theta > 0, -1.0 / (p * _LN2), -1.0 / ((p - 1.0) * _LN2))
    return d_theta, d_p


@dataclass
class EntropyLossReport:
    total_bits: float  # estimated bits over all valid signs (rescaled)
    valid_count: int  # number of valid theta scalars
    total_count: int  # M: all theta scalars, valid and invalid
    sampled_count: int = 0

    @property
    def loss_value(self) -> float:
        return self.total_bits / self.total_count


def entropy_loss(
    probs: np.ndarray,
    thetas: np.ndarray,
    valid_count: int,
    total_count: int,
) -> EntropyLossReport:
    """Estimate total bits from a (sub)sample of valid signs.

    ``probs``/``thetas`` cover the sampled signs; the sum is rescaled by
    valid_count / len(sample) so the estimate stays unbiased under
    subsampling.
    """
    probs = np.asarray(probs, dtype=np.float64).ravel()
    thetas = np.asarray(thetas).ravel()
    if probs.shape != thetas.shape:
        raise ValueError("probs and thetas must align")
    if len(probs) == 0:
        import warnings

        warnings.warn("entropy loss over an empty valid set", stacklevel=2)
        return EntropyLossReport(0.0, valid_count, total_count, 0)
    bits = bit_estimate(probs, thetas)
    scale = valid_count / len(probs)
    return EntropyLossReport(float(bits.sum() * scale), valid_count,
                             total_count, len(probs))


def total_loss(l_mse: float, report: EntropyLossReport, lam: float) -> float:
    """Joint objective: reconstruction error plus lam * bits / M."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return float(l_mse + lam * report.loss_value)
