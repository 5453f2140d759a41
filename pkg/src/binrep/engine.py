"""Bit-packed inference engine.

Binary activations occupy one bit per unit; {-1,+1} weights one sign bit
per weight (bit 1 -> +1). A dot product of a sign-weight row w against an
activation bit vector a is 2*popcount(w AND a) - popcount(a), so hidden
layers run entirely on word-level integer arithmetic. The first layer and
the classifier head work on real inputs / real scores.

Bit order: unit j occupies bit j % 64 of word j // 64.
"""

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .activation import BoundedRectifier, STEP
from .network import Conv2D, Dense, Flatten, MaxPool
from .tensor import im2col

WORD = 64

BNET_MAGIC = b"BNET"
BNET_VERSION = 1

KIND_REAL_CONV = 1
KIND_REAL_FC = 2
KIND_PCONV = 3
KIND_PFC = 4
KIND_PPOOL = 5
KIND_FLATTEN = 6
KIND_HEAD = 7


class ExportError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


def pack_bits(bits):
    """Pack a 0/1 array along its last axis into little-endian uint64 words."""
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    nbytes = packed.shape[-1]
    pad = (-nbytes) % 8
    if pad:
        packed = np.concatenate(
            [packed, np.zeros(packed.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1)
    return np.ascontiguousarray(packed).view("<u8")


def unpack_bits(words, n):
    """Inverse of pack_bits for the first n bits."""
    as_bytes = np.ascontiguousarray(words).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[..., :n]


def popcount_dot(w_words, a_words, a_pop=None):
    """2*popcount(w AND a) - popcount(a) for every (row of w, row of a).

    w_words: [out, W]; a_words: [..., W]. Returns int64 [..., out].
    """
    if a_pop is None:
        a_pop = np.bitwise_count(a_words).sum(axis=-1).astype(np.int64)
    # Accumulate word by word: peak memory stays at one [..., out] slab
    # instead of the full [..., out, W] broadcast.
    wa = np.zeros(a_words.shape[:-1] + (w_words.shape[0],), dtype=np.int64)
    for wi in range(w_words.shape[-1]):
        wa += np.bitwise_count(a_words[..., wi, None] & w_words[:, wi])
    return 2 * wa - a_pop[..., None]


@dataclass
class PackedActivations:
    words: np.ndarray  # uint64 [batch, W]
    n_units: int
    shape: tuple       # logical per-sample shape

    def popcount(self):
        return np.bitwise_count(self.words).sum(axis=-1).astype(np.int64)


def pack_activations(bits, shape=None):
    """bits: 0/1 array [batch, units...] -> PackedActivations."""
    flat = np.asarray(bits).reshape(len(bits), -1)
    return PackedActivations(pack_bits(flat), flat.shape[1],
                             shape or tuple(flat.shape[1:]))


# --- layer records -----------------------------------------------------

@dataclass
class RealConvRecord:
    kind: int
    weight: np.ndarray   # f64
    bias: np.ndarray     # f64
    signs: np.ndarray    # i8, step direction per output channel
    stride: int = 1
    pad: int = 0


@dataclass
class PackedAffineRecord:
    kind: int
    out_features: int
    in_features: int     # patch length for conv: c_in*kh*kw
    words: np.ndarray    # uint64 [out, W]
    thresholds: np.ndarray  # i64 per output channel
    signs: np.ndarray    # i8 per output channel
    conv_shape: tuple = ()  # (c_out, c_in, kh, kw, stride, pad) for PCONV
    bias: np.ndarray = None  # f64, HEAD only


@dataclass
class PoolRecord:
    kind: int
    window: int
    stride: int


@dataclass
class FlattenRecord:
    kind: int = KIND_FLATTEN


@dataclass
class PackedModel:
    records: list = field(default_factory=list)


def _signs_of(slopes):
    return np.sign(slopes).astype(np.int8)


def _thresholds(bias, signs):
    """Integer firing thresholds equivalent to sign(k)*(ipre + bias) > 0.

    sign +1: fire iff ipre >= floor(-bias) + 1
    sign -1: fire iff ipre <= ceil(-bias) - 1
    The conversion is exact for integer pre-activations; no accuracy is
    lost to the rounding.
    """
    t = np.where(signs > 0,
                 np.floor(-bias) + 1,
                 np.ceil(-bias) - 1)
    return t.astype(np.int64)


def export_packed(net):
    """Freeze a fully binarized network into a PackedModel.

    Requires every activation to be a bounded rectifier in step mode and
    every affine weight except the first layer's (and excluding the head's
    bias) to be exactly -1 or +1.
    """
    layers = net.layers
    for r in net.rectifiers():
        if r.mode != STEP:
            raise ExportError(f"{r.name}: not in step mode")
    affines = net.affine_layers()
    records = []
    seen_affine = 0
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, (Conv2D, Dense)):
            seen_affine += 1
            is_first = seen_affine == 1
            is_head = layer is affines[-1]
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            if not is_head and not isinstance(nxt, BoundedRectifier):
                raise ExportError(f"{layer.name}: affine layer without a "
                                  f"following rectifier")
            if not is_first:
                w = layer.weight.data
                bad = np.argwhere(np.abs(w) != 1.0)
                if len(bad):
                    raise ExportError(
                        f"{layer.name}: non-binary weight at index "
                        f"{tuple(bad[0].tolist())}")
            if is_first:
                signs = _signs_of(nxt.slopes.data)
                kind = KIND_REAL_CONV if isinstance(layer, Conv2D) else KIND_REAL_FC
                records.append(RealConvRecord(
                    kind, layer.weight.data.copy(), layer.bias.data.copy(),
                    signs, getattr(layer, "stride", 1), getattr(layer, "pad", 0)))
                i += 2  # consume the rectifier
                continue
            w = layer.weight.data
            rows = ((w + 1) / 2).reshape(w.shape[0], -1)  # -1 -> bit 0, +1 -> bit 1
            words = pack_bits(rows)
            if is_head:
                records.append(PackedAffineRecord(
                    KIND_HEAD, w.shape[0], rows.shape[1], words,
                    np.zeros(w.shape[0], dtype=np.int64),
                    np.ones(w.shape[0], dtype=np.int8),
                    bias=layer.bias.data.copy()))
                i += 1
                continue
            signs = _signs_of(nxt.slopes.data)
            thr = _thresholds(layer.bias.data, signs)
            if isinstance(layer, Conv2D):
                c_out, c_in, kh, kw = w.shape
                records.append(PackedAffineRecord(
                    KIND_PCONV, c_out, c_in * kh * kw, words, thr, signs,
                    conv_shape=(c_out, c_in, kh, kw, layer.stride, layer.pad)))
            else:
                records.append(PackedAffineRecord(
                    KIND_PFC, w.shape[0], w.shape[1], words, thr, signs))
            i += 2
        elif isinstance(layer, MaxPool):
            records.append(PoolRecord(KIND_PPOOL, layer.window, layer.stride))
            i += 1
        elif isinstance(layer, Flatten):
            records.append(FlattenRecord())
            i += 1
        elif isinstance(layer, BoundedRectifier):
            raise ExportError(f"{layer.name}: rectifier without a preceding "
                              f"affine layer")
        else:
            raise ExportError(f"cannot pack layer of type {type(layer).__name__}")
    return PackedModel(records)


# --- forward pass -------------------------------------------------------

def _fire(ipre, thresholds, signs):
    """Step decision on integer pre-activations, per output channel."""
    pos = (signs > 0) & (ipre >= thresholds)
    neg = (signs < 0) & (ipre <= thresholds)
    return (pos | neg).astype(np.uint8)


def _real_step(y, signs):
    sgn = signs.reshape((1, -1) + (1,) * (y.ndim - 2))
    return (sgn * y > 0.0).astype(np.uint8)


def _bit_pool(bits, window, stride):
    """Max pool over {0,1} = OR over the window."""
    b, c, h, w = bits.shape
    cols, oh, ow = im2col(bits.reshape(b * c, 1, h, w).astype(np.float64),
                          window, window, stride, 0)
    return (cols.max(axis=1) > 0).astype(np.uint8).reshape(b, c, oh, ow)


def _packed_conv(bits, rec):
    c_out, c_in, kh, kw, stride, pad = rec.conv_shape
    b = bits.shape[0]
    cols, oh, ow = im2col(bits.astype(np.float64), kh, kw, stride, pad)
    patches = np.transpose(cols, (0, 2, 1)).astype(np.uint8)  # [b, P, L]
    words = pack_bits(patches.reshape(-1, patches.shape[-1]))
    ipre = popcount_dot(rec.words, words)                     # [b*P, c_out]
    out = _fire(ipre, rec.thresholds, rec.signs)
    return out.reshape(b, oh * ow, c_out).transpose(0, 2, 1).reshape(b, c_out, oh, ow)


def packed_fc(pa, rec):
    """PackedActivations -> PackedActivations through one sign-weight layer."""
    ipre = popcount_dot(rec.words, pa.words, pa.popcount())
    bits = _fire(ipre, rec.thresholds, rec.signs)
    return pack_activations(bits)


def packed_forward(model, images, timings=None):
    """Real input images -> class scores via the packed pipeline."""
    x = np.asarray(images, dtype=np.float64)
    bits = None
    for rec in model.records:
        t0 = time.perf_counter()
        if rec.kind == KIND_REAL_CONV:
            cols, oh, ow = im2col(x, rec.weight.shape[2], rec.weight.shape[3],
                                  rec.stride, rec.pad)
            wmat = rec.weight.reshape(rec.weight.shape[0], -1)
            y = np.einsum("oc,bcl->bol", wmat, cols) + rec.bias.reshape(1, -1, 1)
            y = y.reshape(x.shape[0], rec.weight.shape[0], oh, ow)
            bits = _real_step(y, rec.signs)
        elif rec.kind == KIND_REAL_FC:
            y = x @ rec.weight.T + rec.bias
            bits = _real_step(y, rec.signs)
        elif rec.kind == KIND_PCONV:
            bits = _packed_conv(bits, rec)
        elif rec.kind == KIND_PFC:
            out = packed_fc(pack_activations(bits), rec)
            bits = unpack_bits(out.words, out.n_units)
        elif rec.kind == KIND_PPOOL:
            bits = _bit_pool(bits, rec.window, rec.stride)
        elif rec.kind == KIND_FLATTEN:
            if bits is not None:
                bits = bits.reshape(len(bits), -1)
            else:
                x = x.reshape(len(x), -1)
        elif rec.kind == KIND_HEAD:
            ipre = popcount_dot(rec.words, pack_bits(bits.reshape(len(bits), -1)))
            scores = ipre.astype(np.float64) + rec.bias
            if timings is not None:
                timings.append((rec.kind, time.perf_counter() - t0))
            return scores
        if timings is not None:
            timings.append((rec.kind, time.perf_counter() - t0))
    raise ModelFormatError("model has no head layer")


# --- serialization ------------------------------------------------------

def _encode_record(rec):
    if rec.kind in (KIND_REAL_CONV, KIND_REAL_FC):
        dims = rec.weight.shape
        head = struct.pack(f"<B{len(dims)}IiI", len(dims), *dims,
                           rec.stride, rec.pad)
        return head + rec.weight.astype("<f8").tobytes() \
            + rec.bias.astype("<f8").tobytes() + rec.signs.tobytes()
    if rec.kind in (KIND_PCONV, KIND_PFC, KIND_HEAD):
        if rec.kind == KIND_PCONV:
            dims = rec.conv_shape
        else:
            dims = (rec.out_features, rec.in_features)
        head = struct.pack(f"<B{len(dims)}IQ", len(dims), *dims,
                           rec.words.shape[-1])
        body = rec.words.astype("<u8").tobytes()
        if rec.kind == KIND_HEAD:
            return head + body + rec.bias.astype("<f8").tobytes()
        return head + body + rec.thresholds.astype("<i8").tobytes() \
            + rec.signs.tobytes()
    if rec.kind == KIND_PPOOL:
        return struct.pack("<II", rec.window, rec.stride)
    if rec.kind == KIND_FLATTEN:
        return b""
    raise ModelFormatError(f"unknown record kind {rec.kind}")


def save_packed(path, model):
    with open(path, "wb") as f:
        f.write(BNET_MAGIC)
        f.write(struct.pack("<II", BNET_VERSION, len(model.records)))
        for rec in model.records:
            value = _encode_record(rec)
            f.write(struct.pack("<BQ", rec.kind, len(value)))
            f.write(value)


def _decode_record(kind, value, offset):
    try:
        if kind in (KIND_REAL_CONV, KIND_REAL_FC):
            (ndim,) = struct.unpack_from("<B", value, 0)
            dims = struct.unpack_from(f"<{ndim}I", value, 1)
            stride, pad = struct.unpack_from("<iI", value, 1 + 4 * ndim)
            off = 1 + 4 * ndim + 8
            wsize = int(np.prod(dims))
            weight = np.frombuffer(value, "<f8", wsize, off).reshape(dims)
            off += 8 * wsize
            bias = np.frombuffer(value, "<f8", dims[0], off)
            off += 8 * dims[0]
            signs = np.frombuffer(value, np.int8, dims[0], off)
            return RealConvRecord(kind, weight.copy(), bias.copy(), signs.copy(),
                                  stride, pad)
        if kind in (KIND_PCONV, KIND_PFC, KIND_HEAD):
            (ndim,) = struct.unpack_from("<B", value, 0)
            dims = struct.unpack_from(f"<{ndim}I", value, 1)
            (n_words,) = struct.unpack_from("<Q", value, 1 + 4 * ndim)
            off = 1 + 4 * ndim + 8
            if kind == KIND_PCONV:
                c_out, c_in, kh, kw, stride, pad = dims
                out_f, in_f, conv_shape = c_out, c_in * kh * kw, tuple(dims)
            else:
                out_f, in_f = dims
                conv_shape = ()
            words = np.frombuffer(value, "<u8", out_f * n_words, off)
            words = words.reshape(out_f, n_words).copy()
            off += 8 * out_f * n_words
            if kind == KIND_HEAD:
                bias = np.frombuffer(value, "<f8", out_f, off).copy()
                return PackedAffineRecord(kind, out_f, in_f, words,
                                          np.zeros(out_f, np.int64),
                                          np.ones(out_f, np.int8), conv_shape,
                                          bias)
            thr = np.frombuffer(value, "<i8", out_f, off).copy()
            off += 8 * out_f
            signs = np.frombuffer(value, np.int8, out_f, off).copy()
            return PackedAffineRecord(kind, out_f, in_f, words, thr, signs,
                                      conv_shape)
        if kind == KIND_PPOOL:
            window, stride = struct.unpack_from("<II", value, 0)
            return PoolRecord(kind, window, stride)
        if kind == KIND_FLATTEN:
            return FlattenRecord()
    except (struct.error, ValueError) as e:
        raise ModelFormatError(f"corrupt record at offset {offset}: {e}") from e
    raise ModelFormatError(f"unknown record kind {kind} at offset {offset}")


def load_packed(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != BNET_MAGIC:
        raise ModelFormatError(f"{path}: bad magic at offset 0: {raw[:4]!r}")
    if len(raw) < 12:
        raise ModelFormatError(f"{path}: truncated header at offset {len(raw)}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != BNET_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    records = []
    off = 12
    for _ in range(count):
        if off + 9 > len(raw):
            raise ModelFormatError(f"{path}: truncated record header at offset {off}")
        kind, length = struct.unpack_from("<BQ", raw, off)
        off += 9
        if off + length > len(raw):
            raise ModelFormatError(f"{path}: truncated record body at offset {off}")
        records.append(_decode_record(kind, raw[off:off + length], off))
        off += length
    return PackedModel(records)


def packed_storage_bytes(model):
    """Payload bytes of the binary (packed) layers only."""
    total = 0
    for rec in model.records:
        if rec.kind in (KIND_PCONV, KIND_PFC, KIND_HEAD):
            total += rec.words.nbytes
    return total


def float32_storage_bytes(model):
    """float32 bytes the same binary-layer weights would need."""
    total = 0
    for rec in model.records:
        if rec.kind in (KIND_PCONV, KIND_PFC, KIND_HEAD):
            total += rec.out_features * rec.in_features * 4
    return total
