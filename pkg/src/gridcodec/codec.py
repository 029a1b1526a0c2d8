"""Self-describing bitstream codec for a trained model.

Stream layout (all integers little-endian):

    magic "CNC1", u8 version, u32 body length, u32 crc32(body)
    body = header || payloads

The header carries every structural hyperparameter the decoder needs to
rebuild the model skeleton, plus the per-level +1 frequency (16-bit fixed
point) and valid-slot count.  Payloads are, in order: the occupancy grid
(entropy coded against a single stored probability), the fuser parameters
(raw float32), the quantized reconstruction MLP, and one arithmetic-coded
sign block per grid level, 3D levels coarse-to-fine first, then the xy/xz/yz
planes.  Validity, inverse hash maps and the PVF are never transmitted; both
sides recompute them from the occupancy grid.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .context import (
    coding_probability,
    dequantize_frequency,
    frequency,
    quantize_frequency,
    slot_probabilities,
)
from .grid import PLANE_AXES
from .model import ABLATE_MODES, ModelState, TrainConfig, build_model
from .occupancy import OccupancyGrid
from .rangecoder import RangeDecoder, RangeEncoder, quantize_prob

MAGIC = b"CNC1"
VERSION = 1

QUANT_MIN_SPAN = 1e-12  # below this the weight tensor counts as constant


class StreamError(ValueError):
    """Malformed, truncated or corrupted bitstream."""


class CodecError(RuntimeError):
    """Encoder self-check failed; the stream would not decode losslessly."""


class ByteReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise StreamError("truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.read(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.read(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.read(4))[0]

    def block(self) -> bytes:
        return self.read(self.u32())


class ByteWriter:
    def __init__(self):
        self.buf = bytearray()

    def raw(self, b: bytes):
        self.buf += b

    def u8(self, v: int):
        self.buf += struct.pack("<B", v)

    def u16(self, v: int):
        self.buf += struct.pack("<H", v)

    def u32(self, v: int):
        self.buf += struct.pack("<I", v)

    def f32(self, v: float):
        self.buf += struct.pack("<f", v)

    def block(self, b: bytes):
        self.u32(len(b))
        self.raw(b)


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack unsigned integers < 2^bits, low bit first within each value."""
    v = np.asarray(values, dtype=np.uint32)
    expanded = ((v[:, None] >> np.arange(bits, dtype=np.uint32)) & 1)
    return np.packbits(expanded.astype(np.uint8).ravel(),
                       bitorder="little").tobytes()


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8),
                        bitorder="little")
    if raw.size < bits * count:
        raise StreamError("truncated payload")
    raw = raw[: bits * count].reshape(count, bits).astype(np.uint32)
    return (raw << np.arange(bits, dtype=np.uint32)).sum(axis=1)


def quantize_mlp(weights: np.ndarray, bits: int):
    """Uniform floor quantization of a flat weight vector.

    Returns (codes, w_min, w_max, constant).  A degenerate span is flagged
    constant and carries no codes.
    """
    w = np.asarray(weights, dtype=np.float64)
    w_min, w_max = float(w.min()), float(w.max())
    if w_max - w_min < QUANT_MIN_SPAN:
        return np.zeros(0, dtype=np.uint32), w_min, w_max, True
    levels = (1 << bits) - 1
    codes = np.floor((w - w_min) * levels / (w_max - w_min)).astype(np.int64)
    codes = np.minimum(codes, levels)  # w == w_max lands one past the top
    return codes.astype(np.uint32), w_min, w_max, False


def dequantize_mlp(codes, w_min: float, w_max: float, bits: int,
                   constant: bool, count: int) -> np.ndarray:
    if constant:
        return np.full(count, w_min, dtype=np.float32)
    levels = (1 << bits) - 1
    return (w_min + codes.astype(np.float64) * (w_max - w_min) / levels).astype(
        np.float32
    )


def encode_occupancy(occ: OccupancyGrid) -> bytes:
    """Entropy code the raw occupancy bits against their global frequency."""
    bits = occ.cells.flatten(order="F")
    p = float(bits.mean())
    p16 = int(quantize_prob(np.array([coding_probability(p)]))[0])
    enc = RangeEncoder()
    signs = np.where(bits, 1, -1)
    enc.encode_signs(signs, np.full(len(signs), p16, dtype=np.uint16))
    return struct.pack("<HH", occ.resolution, p16) + enc.finish()


def decode_occupancy(data: bytes) -> OccupancyGrid:
    if len(data) < 4:
        raise StreamError("truncated payload")
    res, p16 = struct.unpack_from("<HH", data, 0)
    n = res**3
    dec = RangeDecoder(data[4:])
    signs = dec.decode_signs(np.full(n, p16, dtype=np.uint16))
    cells = (signs > 0).reshape((res, res, res), order="F")
    if not cells.any():
        raise StreamError("decoded occupancy grid is empty")
    return OccupancyGrid(cells)


def _level_prob16(state: ModelState, dims, axis, index, level, inv, validity,
                  f_g: float, slot_ids: np.ndarray) -> np.ndarray:
    """Per-sign 16-bit coding probabilities for one level's valid slots."""
    n = len(slot_ids)
    if not state.cfg.uses_fuser(dims, index):
        return np.full(n * level.feature_dim,
                       quantize_prob(np.array([coding_probability(f_g)]))[0],
                       dtype=np.uint16)
    prev = state.levels_3d if dims == 3 else state.planes[axis]
    p16 = np.empty((n, level.feature_dim), dtype=np.uint16)
    chunk = 4096
    for lo in range(0, n, chunk):
        res = slot_probabilities(
            slot_ids[lo : lo + chunk], index, level, prev, f_g, inv,
            validity, state.fusers, state.cfg.lc, pvf=state.pvf,
        )
        p16[lo : lo + chunk] = quantize_prob(res.p_slots)
    return p16.ravel()


@dataclass
class SizeBreakdown:
    """Per-section byte counts of one encoded stream."""

    total: int
    emb3d: int
    emb2d: int
    mlp: int
    ctx: int
    occ: int
    header: int


def encode_model(state: ModelState, verify: bool = True):
    """Serialize a prepared model; returns (stream bytes, SizeBreakdown).

    Mutates ``state``: the reconstruction weights are replaced by their
    dequantized values so that encoder-side evaluation matches the decoder.
    """
    cfg = state.cfg
    state.refresh_pvf()  # plane contexts must see the final 3D signs
    w = ByteWriter()
    w.u8(cfg.feature_dim)
    w.u8(cfg.channels)
    w.u8(cfg.lc)
    w.u8(0 if cfg.ld is None else cfg.ld)
    w.u8(cfg.quant_bits)
    w.u8(ABLATE_MODES.index(cfg.ablate))
    w.f32(cfg.lam)
    w.u16(cfg.occ_res)
    for g in (cfg.grid_3d(), cfg.grid_2d("xy")):
        w.u8(g.num_levels)
        w.u16(g.min_res)
        w.u16(g.max_res)
        w.u8(g.table_size_log2)
    w.u8(len(cfg.hidden))
    for h in cfg.hidden:
        w.u16(h)

    level_meta = []  # (f_g dequantized, valid slot ids)
    for dims, axis, index, level, inv, validity in state.all_levels():
        slot_ids = np.flatnonzero(validity.slot_valid)
        if len(slot_ids):
            q = quantize_frequency(frequency(level, validity))
        else:
            q = quantize_frequency(0.5)
        w.u16(q)
        w.u32(len(slot_ids))
        level_meta.append((dequantize_frequency(q), slot_ids))
    header_len = len(w.buf)

    occ_payload = encode_occupancy(state.occupancy)
    w.block(occ_payload)
    fuser_payload = state.fusers.param_vector().astype("<f4").tobytes()
    w.block(fuser_payload)

    recon_vec = state.recon_net.param_vector().astype(np.float32)
    codes, w_min, w_max, const = quantize_mlp(recon_vec, cfg.quant_bits)
    mlp = ByteWriter()
    mlp.f32(w_min)
    mlp.f32(w_max)
    mlp.u8(1 if const else 0)
    if not const:
        mlp.raw(pack_bits(codes, cfg.quant_bits))
    w.block(bytes(mlp.buf))
    # reconstruction must use the same weights the decoder will see
    state.recon_net.set_param_vector(
        dequantize_mlp(codes, w_min, w_max, cfg.quant_bits, const,
                       recon_vec.size)
    )

    emb3d = emb2d = 0
    for (dims, axis, index, level, inv, validity), (f_g, slot_ids) in zip(
        state.all_levels(), level_meta
    ):
        if len(slot_ids) == 0:
            w.u32(0)
            continue
        p16 = _level_prob16(state, dims, axis, index, level, inv, validity,
                            f_g, slot_ids)
        signs = level.raw_signs()[slot_ids].ravel()
        enc = RangeEncoder()
        enc.encode_signs(signs, p16)
        payload = enc.finish()
        w.block(payload)
        if dims == 3:
            emb3d += len(payload)
        else:
            emb2d += len(payload)

    body = bytes(w.buf)
    stream = (MAGIC + struct.pack("<BII", VERSION, len(body), zlib.crc32(body))
              + body)
    mlp_bytes = len(mlp.buf)
    covered = emb3d + emb2d + mlp_bytes + len(fuser_payload) + len(occ_payload)
    sizes = SizeBreakdown(
        total=len(stream), emb3d=emb3d, emb2d=emb2d, mlp=mlp_bytes,
        ctx=len(fuser_payload), occ=len(occ_payload),
        header=len(stream) - covered,  # fixed header plus block framing
    )
    if verify:
        decoded = decode_model(stream)
        _check_lossless(state, decoded)
    return stream, sizes


def _check_lossless(state: ModelState, decoded: ModelState) -> None:
    for (d1, a1, i1, l1, _, v1), (d2, a2, i2, l2, _, v2) in zip(
        state.all_levels(), decoded.all_levels()
    ):
        if not np.array_equal(l1.signs(), l2.signs()):
            raise CodecError(f"sign mismatch in level {d1}D #{i1}")
    if not np.array_equal(state.fusers.param_vector(),
                          decoded.fusers.param_vector()):
        raise CodecError("fuser parameter mismatch after decode")
    if not np.array_equal(state.recon_net.param_vector(),
                          decoded.recon_net.param_vector()):
        raise CodecError("reconstruction weights mismatch after decode")


def decode_model(stream: bytes) -> ModelState:
    if len(stream) < 13 or stream[:4] != MAGIC:
        raise StreamError("bad magic; not a coded field stream")
    version, body_len, crc = struct.unpack_from("<BII", stream, 4)
    if version != VERSION:
        raise StreamError(f"unsupported stream version {version}")
    body = stream[13:]
    if len(body) < body_len:
        raise StreamError("truncated payload")
    body = body[:body_len]
    if zlib.crc32(body) != crc:
        raise StreamError("checksum mismatch; stream corrupted")
    r = ByteReader(body)

    feature_dim = r.u8()
    channels = r.u8()
    lc = r.u8()
    ld = r.u8() or None
    quant_bits = r.u8()
    ablate_idx = r.u8()
    if ablate_idx >= len(ABLATE_MODES):
        raise StreamError("unknown ablation mode in header")
    lam = r.f32()
    occ_res = r.u16()
    g3 = (r.u8(), r.u16(), r.u16(), r.u8())
    g2 = (r.u8(), r.u16(), r.u16(), r.u8())
    n_hidden = r.u8()
    hidden = tuple(r.u16() for _ in range(n_hidden))
    try:
        cfg = TrainConfig(
            levels_3d=g3[0], min_res_3d=g3[1], max_res_3d=g3[2], log2_3d=g3[3],
            levels_2d=g2[0], min_res_2d=g2[1], max_res_2d=g2[2], log2_2d=g2[3],
            feature_dim=feature_dim, channels=channels, lc=lc, ld=ld,
            ablate=ABLATE_MODES[ablate_idx], occ_res=occ_res,
            quant_bits=quant_bits, hidden=hidden, lam=lam,
        )
    except ValueError as exc:
        raise StreamError(f"inconsistent header: {exc}") from exc

    n_levels = cfg.levels_3d + 3 * cfg.levels_2d
    level_meta = [(dequantize_frequency(r.u16()), r.u32())
                  for _ in range(n_levels)]

    occ = decode_occupancy(r.block())
    if occ.resolution != occ_res:
        raise StreamError("occupancy resolution disagrees with header")
    state = build_model(cfg, occ, np.random.default_rng(0))

    fuser_payload = r.block()
    expected = state.fusers.param_vector().size
    vec = np.frombuffer(fuser_payload, dtype="<f4")
    if vec.size != expected:
        raise StreamError("fuser payload size disagrees with header")
    state.fusers.set_param_vector(vec)

    mlp = ByteReader(r.block())
    w_min, w_max = mlp.f32(), mlp.f32()
    const = mlp.u8() == 1
    count = state.recon_net.n_params
    if const:
        codes = None
    else:
        codes = unpack_bits(mlp.data[mlp.pos :], quant_bits, count)
    state.recon_net.set_param_vector(
        dequantize_mlp(codes, w_min, w_max, quant_bits, const, count)
    )

    for (dims, axis, index, level, inv, validity), (f_g, n_valid) in zip(
        state.all_levels(), level_meta
    ):
        slot_ids = np.flatnonzero(validity.slot_valid)
        if len(slot_ids) != n_valid:
            raise StreamError(
                f"valid-slot count mismatch in level {dims}D #{index}"
            )
        payload = r.block()
        level.latent[...] = 1.0  # invalid slots decode as +1
        if n_valid == 0:
            continue
        p16 = _level_prob16(state, dims, axis, index, level, inv, validity,
                            f_g, slot_ids)
        dec = RangeDecoder(payload)
        signs = dec.decode_signs(p16).reshape(n_valid, level.feature_dim)
        level.latent[slot_ids] = signs.astype(np.float32)
        if dims == 3 and index == cfg.levels_3d:
            state.refresh_pvf()  # planes are predicted against decoded PVF
    return state
