"""Array plumbing shared by every module.

Tensors are plain ``float32`` numpy arrays in row-major order. This module adds
the seeded SplitMix64 generator, align-corners-false resampling, sRGB to CIELAB
conversion, the STF1 binary tensor format and binary PPM raster I/O.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

STF_MAGIC = b"STF1"
STF_MAX_RANK = 5


class Prng:
    """SplitMix64 generator.

    The state sequence is arithmetic, so blocks of draws are produced with
    vectorised uint64 math and are bitwise identical to drawing one by one.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def _block(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK64
        return z

    def next_u64(self) -> int:
        return int(self._block(1)[0])

    def next_f32(self) -> float:
        return float(self.random(1)[0])

    def random(self, n: int) -> np.ndarray:
        """``n`` floats in [0, 1) built from the top 24 bits of each draw."""
        z = self._block(int(n))
        return ((z >> np.uint64(40)).astype(np.float64) * 2.0**-24).astype(np.float32)

    def uniform(self, low: float, high: float, n: int) -> np.ndarray:
        u = self.random(n).astype(np.float64)
        return low + (high - low) * u

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform in [0, high), high < 2**32."""
        if not 0 < high < 2**32:
            raise ValueError("high must be in (0, 2**32)")
        z = self._block(int(n)) >> np.uint64(32)
        return ((z * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def randint(self, low: int, high: int) -> int:
        """One integer in [low, high] inclusive."""
        return low + int(self.integers(high - low + 1, 1)[0])

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(i + 1, 1)[0])
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def derive_seed(seed: int, index: int) -> int:
    """Per-item seed: ``seed xor index`` pushed through one SplitMix64 step."""
    return Prng((int(seed) ^ int(index)) & _MASK64).next_u64()


# -- resampling ----------------------------------------------------------------

def _resample_axis(x: np.ndarray, axis: int, out_n: int) -> np.ndarray:
    n = x.shape[axis]
    if out_n == n:
        return x
    src = (np.arange(out_n, dtype=np.float64) + 0.5) * (n / out_n) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    shape = [1] * x.ndim
    shape[axis] = out_n
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    # a + f*(b - a) keeps constant runs exact
    return a + frac.reshape(shape) * (b - a)


def _resample(t: np.ndarray, sizes: tuple[int, ...]) -> np.ndarray:
    if any(int(s) < 1 for s in sizes):
        raise ValueError(f"target sizes must be positive, got {sizes}")
    spatial = t.ndim - len(sizes)
    if spatial < 0 or min(t.shape) < 1:
        raise ValueError(f"cannot resample tensor of shape {t.shape}")
    if tuple(t.shape[spatial:]) == tuple(sizes):
        return t.astype(np.float32, copy=True)
    x = t.astype(np.float64)
    for k, out_n in enumerate(sizes):
        x = _resample_axis(x, spatial + k, int(out_n))
    lo, hi = float(t.min()), float(t.max())
    return np.clip(x, lo, hi).astype(np.float32)


def resize_bilinear_2d(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a [C, H, W] tensor (align_corners=False)."""
    if t.ndim != 3:
        raise ValueError(f"expected [C,H,W], got shape {t.shape}")
    return _resample(t, (out_h, out_w))


def resize_trilinear_3d(t: np.ndarray, out_t: int, out_h: int, out_w: int) -> np.ndarray:
    """Trilinear resample of a [C, T, H, W] tensor (align_corners=False)."""
    if t.ndim != 4:
        raise ValueError(f"expected [C,T,H,W], got shape {t.shape}")
    return _resample(t, (out_t, out_h, out_w))


# -- colour --------------------------------------------------------------------

_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE = _RGB_TO_XYZ.sum(axis=1)


def rgb_to_lab(t: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] (channel axis first) to CIELAB, D65 white point.

    Works on any ``[3, ...]`` tensor, so video volumes convert in one call.
    Out-of-range inputs are clamped.
    """
    if t.shape[0] != 3:
        raise ValueError(f"expected 3 channels on axis 0, got shape {t.shape}")
    rgb = np.clip(t.astype(np.float64), 0.0, 1.0)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.tensordot(_RGB_TO_XYZ, lin, axes=(1, 0))
    xyz /= _WHITE.reshape((3,) + (1,) * (t.ndim - 1))
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[0] = 116.0 * f[1] - 16.0
    lab[1] = 500.0 * (f[0] - f[1])
    lab[2] = 200.0 * (f[1] - f[2])
    return lab.astype(np.float32)


# -- STF1 tensor files -----------------------------------------------------------

class StfError(ValueError):
    """Malformed STF1 file."""


class StfMagicError(StfError):
    pass


class StfRankError(StfError):
    pass


class StfSizeOverflowError(StfError):
    pass


class StfTruncatedError(StfError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if not 1 <= t.ndim <= STF_MAX_RANK:
        raise StfRankError(f"rank must be 1..{STF_MAX_RANK}, got {t.ndim}")
    if min(t.shape) < 1:
        raise StfError(f"zero-sized dimension in shape {t.shape}")
    header = STF_MAGIC + struct.pack("<B4x", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != STF_MAGIC:
        raise StfMagicError("not an STF1 file (bad magic)")
    if len(buf) < 9:
        raise StfTruncatedError("header truncated")
    rank = buf[4]
    if not 1 <= rank <= STF_MAX_RANK:
        raise StfRankError(f"rank must be 1..{STF_MAX_RANK}, got {rank}")
    head = 9 + 4 * rank
    if len(buf) < head:
        raise StfTruncatedError("header truncated")
    dims = struct.unpack(f"<{rank}I", buf[9:head])
    if min(dims) < 1:
        raise StfError(f"zero-sized dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count * 4 >= 2**63:
        raise StfSizeOverflowError(f"element count {count} overflows a 64-bit byte size")
    if len(buf) - head < count * 4:
        raise StfTruncatedError(f"payload holds {(len(buf) - head) // 4} of {count} values")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=head)
    return data.astype(np.float32).reshape(dims)


def write_tensor(path, t: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- PPM rasters -------------------------------------------------------------------

def encode_ppm(image: np.ndarray) -> bytes:
    """[3, H, W] floats in [0, 1] to binary P6 bytes."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got shape {image.shape}")
    u8 = np.clip(np.rint(image.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = u8.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + u8.transpose(1, 2, 0).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        fields.append(buf[start:pos])
    pos += 1
    if fields[0] != b"P6":
        raise ValueError("only binary P6 PPM is supported")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)) / np.float32(255.0)


def write_ppm(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())
