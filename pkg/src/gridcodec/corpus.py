"""Synthetic binary-grid corpora for codec-only benchmarks.

Three kinds of 100^3 (one million) sign grids:

    iid         independent signs, P(+1) = p
    ones        all +1
    correlated  a coarse random grid upsampled twice with 10% flips per stage

The correlated corpus has strong parent-child structure, so a context model
conditioned on the coarser stage codes it well below its marginal entropy.
"""
from __future__ import annotations

import struct

import numpy as np

from .context import coding_probability
from .entropy import bit_estimate, clamp_probability
from .nn import Adam, DenseNet
from .rangecoder import RangeDecoder, RangeEncoder, quantize_prob

MAGIC = b"CNB1"

CORPUS_KINDS = ("iid", "ones", "correlated")

CORPUS_SIDE = 100  # 100^3 = 10^6 signs

FLIP_PROB = 0.1


def gen_corpus(kind: str, seed: int = 0, p: float = 0.5) -> np.ndarray:
    """Flat int8 array of +-1 signs, length CORPUS_SIDE^3."""
    n = CORPUS_SIDE**3
    if kind == "iid":
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be a probability")
        rng = np.random.default_rng(seed)
        return np.where(rng.random(n) < p, 1, -1).astype(np.int8)
    if kind == "ones":
        return np.ones(n, dtype=np.int8)
    if kind == "correlated":
        fine, _ = gen_correlated_pair(seed)
        return fine.ravel()
    raise ValueError(f"unknown corpus kind {kind!r}; pick from {CORPUS_KINDS}")


def _upsample2(grid: np.ndarray) -> np.ndarray:
    return grid.repeat(2, axis=0).repeat(2, axis=1).repeat(2, axis=2)


def gen_correlated_pair(seed: int = 0):
    """(fine, parent): the 100^3 corpus and the parent sign of each entry.

    The parent is the 50^3 stage value each fine sign was flipped from; it is
    the natural context for predicting the fine sign.
    """
    rng = np.random.default_rng(seed)
    coarse = np.where(rng.random((25, 25, 25)) < 0.5, 1, -1).astype(np.int8)
    mid = _upsample2(coarse)
    mid = np.where(rng.random(mid.shape) < FLIP_PROB, -mid, mid)
    parent = _upsample2(mid)
    fine = np.where(rng.random(parent.shape) < FLIP_PROB, -parent, parent)
    return fine.astype(np.int8), parent.astype(np.int8)


def save_corpus(signs: np.ndarray, path: str) -> None:
    signs = np.asarray(signs, dtype=np.int8).ravel()
    packed = np.packbits((signs > 0).astype(np.uint8), bitorder="little")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(signs)) + packed.tobytes())


def load_corpus(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError("not a corpus file")
    (n,) = struct.unpack_from("<I", data, 4)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=8),
                         bitorder="little")[:n]
    return np.where(bits > 0, 1, -1).astype(np.int8)


def frequency_code(signs: np.ndarray) -> bytes:
    """Arithmetic-code a corpus against its own +1 frequency."""
    signs = np.asarray(signs, dtype=np.int8).ravel()
    p = coding_probability(float((signs > 0).mean()))
    p16 = quantize_prob(np.array([p]))[0]
    enc = RangeEncoder()
    enc.encode_signs(signs, np.full(len(signs), p16, dtype=np.uint16))
    return enc.finish()


def frequency_decode(data: bytes, n: int, p: float) -> np.ndarray:
    p16 = quantize_prob(np.array([coding_probability(p)]))[0]
    return RangeDecoder(data).decode_signs(np.full(n, p16, dtype=np.uint16))


def train_parent_context(fine: np.ndarray, parent: np.ndarray,
                         iterations: int = 300, batch: int = 8192,
                         seed: int = 0) -> DenseNet:
    """Fit a tiny logistic model P(+1 | parent sign) by gradient descent."""
    fine = np.asarray(fine, dtype=np.float64).ravel()
    parent = np.asarray(parent, dtype=np.float64).ravel()
    net = DenseNet([1, 1], ["sigmoid"], rng=np.random.default_rng(seed))
    opt = Adam(net.params)
    rng = np.random.default_rng(seed + 1)
    for it in range(iterations):
        idx = rng.integers(0, len(fine), size=batch)
        x = parent[idx][:, None]
        t = fine[idx]
        p, cache = net.forward(x)
        p = clamp_probability(p)
        # d(bit cost)/dp, averaged over the batch
        d_p = np.where(t[:, None] > 0, -1.0 / (p * np.log(2.0)),
                       1.0 / ((1.0 - p) * np.log(2.0))) / batch
        grads, _ = net.backward(d_p, cache)
        opt.step(grads, 0.05)
    return net


def context_code(fine: np.ndarray, parent: np.ndarray,
                 net: DenseNet) -> bytes:
    """Arithmetic-code the corpus against the parent-conditioned model."""
    p = clamp_probability(
        net.forward_only(np.asarray(parent, dtype=np.float64).ravel()[:, None])
    ).ravel()
    enc = RangeEncoder()
    enc.encode_signs(np.asarray(fine, dtype=np.int8).ravel(),
                     quantize_prob(p))
    return enc.finish()


def context_vs_frequency(seed: int = 0):
    """(context bytes, frequency bytes) on the correlated corpus."""
    fine, parent = gen_correlated_pair(seed)
    net = train_parent_context(fine, parent, seed=seed)
    return len(context_code(fine, parent, net)), len(frequency_code(fine))


def estimate_bits(signs: np.ndarray, p: np.ndarray) -> float:
    """Total estimated bits of a sign sequence under per-symbol probabilities."""
    return float(bit_estimate(clamp_probability(np.asarray(p, np.float64)),
                              np.asarray(signs)).sum())
