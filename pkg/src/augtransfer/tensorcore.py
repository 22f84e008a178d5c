"""Dense tensor helpers, counter-based random streams and the binary tensor format.

Tensors are plain ``numpy.float64`` arrays in C (row-major) order. Everything
here is a pure function of its inputs.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"AUGT"
FORMAT_VERSION = 1

# Smallest sigma accepted by gaussian_kernel; smaller values collapse to identity.
_MIN_SIGMA = 1e-6


class DimensionError(ValueError):
    """Raised when a tensor has the wrong rank or incompatible shape."""


class UndefinedSimilarityError(ValueError):
    """Raised when a cosine similarity involves a zero vector."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64, order="C")


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def stream_id(*keys) -> int:
    """Hash an arbitrary tuple of ints/strings to a 64-bit stream id."""
    h = hashlib.blake2b(digest_size=8)
    for k in keys:
        h.update(repr(k).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Draws depend only on the pair, never on the order in which streams are
    created or consumed, so work split across threads stays deterministic.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id])
        return np.random.Generator(np.random.Philox(ss))

    def derive(self, *keys) -> "RngStream":
        return RngStream(self.seed, stream_id(self.stream_id, *keys))


# ---------------------------------------------------------------------------
# Kernels and convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Kernel2D:
    weights: np.ndarray

    def __post_init__(self):
        w = as_tensor(self.weights)
        if w.ndim != 2 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise ValueError(f"kernel must be 2-D with odd sides, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def identity(cls, size: int = 3) -> "Kernel2D":
        w = np.zeros((size, size))
        w[size // 2, size // 2] = 1.0
        return cls(w)

    def flipped(self) -> "Kernel2D":
        return Kernel2D(self.weights[::-1, ::-1].copy())


SHARPEN_MASK = Kernel2D(
    np.array([[-0.5, -0.5, -0.5], [-0.5, 5.0, -0.5], [-0.5, -0.5, -0.5]])
)


def gaussian_kernel(size: int, sigma: float | None = None) -> Kernel2D:
    """Isotropic Gaussian on a ``size x size`` grid, normalized to sum 1.

    ``sigma`` defaults to ``size / 3`` so that +-3 sigma lands on the border.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if sigma is None:
        sigma = size / 3.0
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    sigma = max(float(sigma), _MIN_SIGMA)
    r = np.arange(size) - size // 2
    g = np.exp(-(r.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return Kernel2D(w / w.sum())


def conv2d_same(x: np.ndarray, k: Kernel2D) -> np.ndarray:
    """Per-channel cross-correlation with zero padding; output keeps H, W.

    Accepts ``[C, H, W]`` or any leading batch dims ``[..., C, H, W]``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3:
        raise DimensionError(f"expected [..., C, H, W], got shape {x.shape}")
    kh, kw = k.weights.shape
    ph, pw = kh // 2, kw // 2
    H, W = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(x, pad)
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            w = k.weights[i, j]
            if w != 0.0:
                out += w * xp[..., i : i + H, j : j + W]
    return out


def conv2d_same_adjoint(g: np.ndarray, k: Kernel2D) -> np.ndarray:
    """Adjoint of :func:`conv2d_same` (correlation with the flipped kernel)."""
    return conv2d_same(g, k.flipped())


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def l1_norm(x: np.ndarray) -> float:
    return float(np.abs(x).sum())


def sign(x: np.ndarray) -> np.ndarray:
    return np.sign(np.asarray(x, dtype=np.float64))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity with a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Binary tensor file
# ---------------------------------------------------------------------------


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = as_tensor(x)
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, x.ndim)
    dims = struct.pack(f"<{x.ndim}Q", *x.shape)
    return head + dims + x.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ValueError("not an AUGT tensor file (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported AUGT version {version}")
    off = 12
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 8 * n:
        raise ValueError(f"payload length {len(buf) - off} does not match shape {dims}")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=off)
    return data.astype(np.float64).reshape(dims)


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
