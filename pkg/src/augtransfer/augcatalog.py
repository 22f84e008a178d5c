"""Augmentation operators with gradient pullbacks.

Every operator works on a batch ``x`` of shape ``[B, C, H, W]`` and takes one
``numpy.random.Generator`` per batch element, so a sample's draws never depend
on what else is in the batch. ``apply`` returns ``multiplicity`` pairs of
``(sample, pullback)``; a pullback maps a gradient at the sample back to a
gradient at ``x`` and is always linear in its argument.

Operators flagged ``differentiable`` have exact pullbacks (for the random
draws fixed). The others use a straight-through surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, ClassVar

import numpy as np

from .tensorcore import (
    SHARPEN_MASK,
    DimensionError,
    Kernel2D,
    RngStream,
    conv2d_same,
    conv2d_same_adjoint,
    gaussian_kernel,
)

Pullback = Callable[[np.ndarray], np.ndarray]

GREY_WEIGHTS = (0.299, 0.587, 0.114)

# RGB -> YIQ; hue rotation is a rotation of the (I, Q) plane.
_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def _identity(g):
    return g


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass
class AugContext:
    """Side information some operators need.

    ``origin`` is the benign batch (for operators acting on the perturbation),
    ``labels`` the true labels, and ``gallery``/``gallery_labels`` the pool
    mixing operators draw partner images from. With no gallery, the benign
    batch itself is used. ``static_streams`` give per-sample draws that stay
    fixed across attack iterations.
    """

    origin: np.ndarray | None = None
    labels: np.ndarray | None = None
    gallery: np.ndarray | None = None
    gallery_labels: np.ndarray | None = None
    static_streams: list | None = None

    def pool(self, x):
        if self.gallery is not None:
            return self.gallery, self.gallery_labels
        if self.origin is not None:
            return self.origin, self.labels
        return x, self.labels


# ---------------------------------------------------------------------------
# Index-remap machinery (crop-resize, flip, rotation, shifts)
# ---------------------------------------------------------------------------


def _remap(x: np.ndarray, src: np.ndarray):
    """Gather ``x[b, c].flat[src[b]]`` with ``-1`` meaning zero fill.

    Returns the output and its exact adjoint (a scatter-add).
    """
    B, C, H, W = x.shape
    HW = H * W
    idx = np.where(src < 0, HW, src).reshape(B, 1, HW)
    xf = np.concatenate([x.reshape(B, C, HW), np.zeros((B, C, 1))], axis=2)
    out = np.take_along_axis(xf, np.broadcast_to(idx, (B, C, HW)), axis=2).reshape(B, C, H, W)

    lin = (np.arange(B * C).reshape(B, C, 1) * (HW + 1) + idx).ravel()

    def pullback(g):
        acc = np.bincount(lin, weights=np.asarray(g, dtype=np.float64).ravel(), minlength=B * C * (HW + 1))
        return acc.reshape(B, C, HW + 1)[:, :, :HW].reshape(B, C, H, W)

    return out, pullback


def _grid(H, W):
    return np.mgrid[0:H, 0:W]


def _crop_resize_src(H, W, top, left, ch, cw):
    rows = top + np.minimum(((np.arange(H) + 0.5) * ch / H).astype(int), ch - 1)
    cols = left + np.minimum(((np.arange(W) + 0.5) * cw / W).astype(int), cw - 1)
    return rows[:, None] * W + cols[None, :]


def _shift_src(H, W, dy, dx):
    r, c = _grid(H, W)
    sr, sc = r - dy, c - dx
    ok = (sr >= 0) & (sr < H) & (sc >= 0) & (sc < W)
    return np.where(ok, sr * W + sc, -1)


def _rotate_src(H, W, angle):
    r, c = _grid(H, W)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    co, si = math.cos(angle), math.sin(angle)
    # inverse map: output pixel -> source pixel
    sy = co * (r - cy) + si * (c - cx) + cy
    sx = -si * (r - cy) + co * (c - cx) + cx
    sr, sc = np.rint(sy).astype(int), np.rint(sx).astype(int)
    ok = (sr >= 0) & (sr < H) & (sc >= 0) & (sc < W)
    return np.where(ok, sr * W + sc, -1)


def _masked(x, keep):
    """Keep where ``keep`` is True; pullback zeroes the rest."""
    keep = keep.astype(np.float64)
    return keep, lambda g: g * keep


# ---------------------------------------------------------------------------
# Base class and registry
# ---------------------------------------------------------------------------

CATALOG: dict[str, type["Augmentation"]] = {}


def register(cls):
    CATALOG[cls.name] = cls
    return cls


class Augmentation:
    """A named operator emitting ``multiplicity`` samples per input."""

    name: ClassVar[str] = ""
    defaults: ClassVar[dict] = {}
    int_params: ClassVar[tuple] = ()
    str_params: ClassVar[dict] = {}
    differentiable: bool = True

    def __init__(self, **params):
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise ValueError(f"{self.name}: unknown parameter(s) {sorted(unknown)}")
        merged = dict(self.defaults)
        for k, v in params.items():
            if k in self.str_params:
                if v not in self.str_params[k]:
                    raise ValueError(f"{self.name}: {k} must be one of {self.str_params[k]}, got {v!r}")
            elif k in self.int_params:
                if float(v) != int(v):
                    raise ValueError(f"{self.name}: {k} must be an integer, got {v!r}")
                v = int(v)
            else:
                v = float(v)
            merged[k] = v
        self.params = merged
        self.validate()

    def validate(self):
        pass

    def _require(self, cond, msg):
        if not cond:
            raise ValueError(f"{self.name}: {msg}")

    @property
    def multiplicity(self) -> int:
        return 1

    @property
    def overrides(self) -> dict:
        return {k: v for k, v in self.params.items() if v != self.defaults[k]}

    def __eq__(self, other):
        return isinstance(other, Augmentation) and self.name == other.name and self.params == other.params

    def __hash__(self):
        return hash((self.name, tuple(sorted(self.params.items()))))

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.overrides.items())
        return f"{self.name}({args})"

    def with_params(self, **params) -> "Augmentation":
        return type(self)(**{**self.overrides, **params})

    def apply(self, x: np.ndarray, rngs: list, ctx: AugContext | None = None) -> list[tuple[np.ndarray, Pullback]]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise DimensionError(f"{self.name}: expected [B, C, H, W], got {x.shape}")
        if len(rngs) != len(x):
            raise ValueError(f"{self.name}: need one generator per batch element")
        out = self._apply(x, rngs, ctx or AugContext())
        assert len(out) == self.multiplicity
        return out

    def _apply(self, x, rngs, ctx):
        raise NotImplementedError

    def __call__(self, x: np.ndarray, rng: RngStream | int = 0, ctx: AugContext | None = None) -> list[np.ndarray]:
        """Convenience wrapper for a single ``[C, H, W]`` image."""
        stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
        return [s[0] for s, _ in self.apply(np.asarray(x, dtype=np.float64)[None], [stream.generator()], ctx)]


def make_augmentation(name: str, **params) -> Augmentation:
    try:
        cls = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown augmentation {name!r}") from None
    return cls(**params)


def catalog_names() -> list[str]:
    return sorted(CATALOG)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


@register
class Identity(Augmentation):
    name = "identity"

    def _apply(self, x, rngs, ctx):
        return [(x.copy(), _identity)]


@register
class Scale(Augmentation):
    """Samples ``x / 2**i`` for ``i = 0 .. m-1``."""

    name = "scale"
    defaults = {"m": 5}
    int_params = ("m",)

    def validate(self):
        self._require(self.params["m"] >= 1, "m must be >= 1")

    @property
    def multiplicity(self):
        return self.params["m"]

    def _apply(self, x, rngs, ctx):
        out = []
        for i in range(self.params["m"]):
            f = 0.5**i
            out.append((x * f, lambda g, f=f: g * f))
        return out


def _pick_partners(x, rngs, ctx, n, static=False):
    """Choose ``n`` partner images per sample, preferring other classes."""
    pool, pool_labels = ctx.pool(x)
    labels = ctx.labels
    picks = np.empty((len(x), n), dtype=int)
    for b in range(len(x)):
        gen = rngs[b]
        if static and ctx.static_streams is not None:
            gen = ctx.static_streams[b].derive("partner").generator()
        if labels is not None and pool_labels is not None:
            cand = np.flatnonzero(np.asarray(pool_labels) != labels[b])
        else:
            cand = np.arange(len(pool))
        if len(cand) == 0:
            cand = np.arange(len(pool))
        picks[b] = cand[gen.integers(0, len(cand), size=n)]
    return pool[picks]  # [B, n, C, H, W]


@register
class Admix(Augmentation):
    """Samples ``(x + eta * x') / 2**i`` for each of ``n_mix`` partners ``x'``."""

    name = "admix"
    defaults = {"eta": 0.2, "m": 5, "n_mix": 1, "resample": 1}
    int_params = ("m", "n_mix", "resample")

    def validate(self):
        p = self.params
        self._require(0.0 <= p["eta"] <= 1.0, "eta must lie in [0, 1]")
        self._require(p["m"] >= 1 and p["n_mix"] >= 1, "m and n_mix must be >= 1")

    @property
    def multiplicity(self):
        return self.params["m"] * self.params["n_mix"]

    def _apply(self, x, rngs, ctx):
        p = self.params
        partners = _pick_partners(x, rngs, ctx, p["n_mix"], static=not p["resample"])
        out = []
        for j in range(p["n_mix"]):
            mixed = x + p["eta"] * partners[:, j]
            for i in range(p["m"]):
                f = 0.5**i
                out.append((mixed * f, lambda g, f=f: g * f))
        return out


def admix_aug(x, partner, eta=0.2, m=5):
    x, partner = np.asarray(x, dtype=np.float64), np.asarray(partner, dtype=np.float64)
    if x.shape != partner.shape:
        raise DimensionError(f"partner shape {partner.shape} does not match {x.shape}")
    return [(x + eta * partner) / 2**i for i in range(m)]


def scale_aug(x, m=5):
    return Scale(m=m)(x)


@register
class Greyscale(Augmentation):
    name = "greyscale"
    defaults = {"wr": GREY_WEIGHTS[0], "wg": GREY_WEIGHTS[1], "wb": GREY_WEIGHTS[2]}

    def validate(self):
        w = self.weights
        self._require(np.all((w >= 0) & (w <= 1)), "weights must lie in [0, 1]")
        self._require(abs(w.sum() - 1.0) < 1e-9, "weights must sum to 1")

    @property
    def weights(self):
        return np.array([self.params["wr"], self.params["wg"], self.params["wb"]])

    def _apply(self, x, rngs, ctx):
        if x.shape[1] != 3:
            raise DimensionError("greyscale needs 3-channel input")
        w = self.weights[None, :, None, None]
        lum = (x * w).sum(axis=1, keepdims=True)
        return [(np.repeat(lum, 3, axis=1), lambda g: w * g.sum(axis=1, keepdims=True))]


def greyscale_aug(x, weights=GREY_WEIGHTS):
    return Greyscale(wr=weights[0], wg=weights[1], wb=weights[2])(x)


def cutmix_box(H, W, lam, rx, ry):
    """Replaced region as (top, left, bottom, right), clipped to the image."""
    rw = round_half_up(W * math.sqrt(1.0 - lam))
    rh = round_half_up(H * math.sqrt(1.0 - lam))
    return ry, rx, min(ry + rh, H), min(rx + rw, W)


@register
class CutMix(Augmentation):
    name = "cutmix"
    defaults = {"lam": 0.5}

    def validate(self):
        self._require(0.0 < self.params["lam"] <= 1.0, "lam must lie in (0, 1]")

    def _apply(self, x, rngs, ctx):
        B, C, H, W = x.shape
        partners = _pick_partners(x, rngs, ctx, 1)[:, 0]
        keep = np.ones_like(x, dtype=bool)
        for b, gen in enumerate(rngs):
            rx = int(gen.uniform(0, W))
            ry = int(gen.uniform(0, H))
            t, l, bt, r = cutmix_box(H, W, self.params["lam"], rx, ry)
            keep[b, :, t:bt, l:r] = False
        out = np.where(keep, x, partners)
        mask, pb = _masked(x, keep)
        return [(out, pb)]


def cutmix_aug(x, partner, lam=0.5, rng: RngStream | int = 0):
    x = np.asarray(x, dtype=np.float64)
    ctx = AugContext(gallery=np.asarray(partner, dtype=np.float64)[None])
    return CutMix(lam=lam)(x, rng, ctx)


@register
class Translate(Augmentation):
    """Random translation.

    ``mode="kernel"`` leaves samples untouched and smooths the pulled-back
    gradient with a Gaussian kernel instead of sampling shifts; ``mode="shift"``
    emits one randomly shifted, zero-filled copy.
    """

    name = "translate"
    defaults = {"mode": "kernel", "size": 7}
    int_params = ("size",)
    str_params = {"mode": ("kernel", "shift")}

    def validate(self):
        self._require(self.params["size"] >= 1 and self.params["size"] % 2 == 1, "size must be odd")

    @property
    def differentiable(self):
        return self.params["mode"] == "shift"

    @property
    def kernel(self) -> Kernel2D:
        return gaussian_kernel(self.params["size"])

    def _apply(self, x, rngs, ctx):
        if self.params["mode"] == "kernel":
            k = self.kernel
            return [(x.copy(), lambda g: ti_kernel_gradient(g, k))]
        B, C, H, W = x.shape
        r = self.params["size"] // 2
        src = np.stack([_shift_src(H, W, *gen.integers(-r, r + 1, size=2)) for gen in rngs])
        return [_remap(x, src)]


def ti_kernel_gradient(g: np.ndarray, k: Kernel2D) -> np.ndarray:
    return conv2d_same_adjoint(g, k)


def translate_aug(x, rng: RngStream | int = 0, size=7):
    return Translate(mode="shift", size=size)(x, rng)


@register
class DiverseInputs(Augmentation):
    """With probability ``p``: random crop, resized back to the input size."""

    name = "diverse_inputs"
    defaults = {"p": 0.5, "min_scale": 0.8}

    def validate(self):
        self._require(0.0 <= self.params["p"] <= 1.0, "p must lie in [0, 1]")
        self._require(0.0 < self.params["min_scale"] <= 1.0, "min_scale must lie in (0, 1]")

    def _src(self, H, W, gen):
        if gen.random() >= self.params["p"]:
            return np.arange(H * W).reshape(H, W)
        lo = max(1, math.ceil(self.params["min_scale"] * H))
        ch = int(gen.integers(lo, H + 1))
        cw = max(1, round_half_up(ch * W / H))
        top = int(gen.integers(0, H - ch + 1))
        left = int(gen.integers(0, W - cw + 1))
        return _crop_resize_src(H, W, top, left, ch, cw)

    def _apply(self, x, rngs, ctx):
        H, W = x.shape[2:]
        return [_remap(x, np.stack([self._src(H, W, g) for g in rngs]))]


@register
class UniformNoise(Augmentation):
    name = "uniform_noise"
    defaults = {"amplitude": 0.1}

    def validate(self):
        self._require(self.params["amplitude"] >= 0.0, "amplitude must be >= 0")

    def _apply(self, x, rngs, ctx):
        a = self.params["amplitude"]
        noise = np.stack([g.uniform(-a, a, size=x.shape[1:]) for g in rngs])
        return [(x + noise, _identity)]


@register
class GaussianNoise(Augmentation):
    name = "gaussian_noise"
    defaults = {"sigma": 0.05}

    def validate(self):
        self._require(self.params["sigma"] >= 0.0, "sigma must be >= 0")

    def _apply(self, x, rngs, ctx):
        s = self.params["sigma"]
        noise = np.stack([g.normal(0.0, s, size=x.shape[1:]) for g in rngs])
        return [(x + noise, _identity)]


@register
class DropPatch(Augmentation):
    """Drops cells of a ``grid x grid`` partition of the perturbation ``x - origin``."""

    name = "drop_patch"
    defaults = {"grid": 16, "p": 0.1}
    int_params = ("grid",)

    def validate(self):
        self._require(self.params["grid"] >= 1, "grid must be >= 1")
        self._require(0.0 <= self.params["p"] <= 1.0, "p must lie in [0, 1]")

    def _apply(self, x, rngs, ctx):
        B, C, H, W = x.shape
        origin = x if ctx.origin is None else ctx.origin
        n = self.params["grid"]
        rows = np.minimum(np.arange(H) * n // H, n - 1)
        cols = np.minimum(np.arange(W) * n // W, n - 1)
        keep = np.empty((B, 1, H, W), dtype=bool)
        for b, gen in enumerate(rngs):
            cells = gen.random((n, n)) >= self.params["p"]
            keep[b, 0] = cells[rows[:, None], cols[None, :]]
        k = keep.astype(np.float64)
        return [(origin + k * (x - origin), lambda g: g * k)]


@register
class ColorJitter(Augmentation):
    """Random brightness, contrast, saturation and hue, then clipped to [0, 1].

    Factors are drawn from ``[1 - v, 1 + v]`` (hue shift from ``[-v, v]``).
    Hue is rotated in YIQ space, which keeps the whole operator linear
    before clipping.
    """

    name = "color_jitter"
    defaults = {"brightness": 0.5, "contrast": 0.5, "saturation": 0.5, "hue": 0.5}

    def validate(self):
        for k in ("brightness", "contrast", "saturation"):
            self._require(0.0 <= self.params[k] <= 1.0, f"{k} must lie in [0, 1]")
        self._require(0.0 <= self.params["hue"] <= 0.5, "hue must lie in [0, 0.5]")

    def _apply(self, x, rngs, ctx):
        if x.shape[1] != 3:
            raise DimensionError("color_jitter needs 3-channel input")
        B, C, H, W = x.shape
        p = self.params
        draws = np.array([
            [g.uniform(1 - p["brightness"], 1 + p["brightness"]),
             g.uniform(1 - p["contrast"], 1 + p["contrast"]),
             g.uniform(1 - p["saturation"], 1 + p["saturation"]),
             g.uniform(-p["hue"], p["hue"])]
            for g in rngs
        ])
        bri, con, sat = (draws[:, i].reshape(B, 1, 1, 1) for i in range(3))
        mats = np.stack([_hue_matrix(h) for h in draws[:, 3]])  # [B, 3, 3]
        w = np.asarray(GREY_WEIGHTS)[None, :, None, None]
        npix = H * W

        y1 = bri * x
        y2 = con * y1 + (1 - con) * (w * y1).sum(axis=(1, 2, 3), keepdims=True) / npix
        y3 = sat * y2 + (1 - sat) * (w * y2).sum(axis=1, keepdims=True)
        y4 = np.einsum("bij,bjhw->bihw", mats, y3)
        inside = ((y4 > 0.0) & (y4 < 1.0)).astype(np.float64)

        def pullback(g):
            g4 = g * inside
            g3 = np.einsum("bji,bjhw->bihw", mats, g4)
            g2 = sat * g3 + (1 - sat) * w * g3.sum(axis=1, keepdims=True)
            g1 = con * g2 + (1 - con) * w * g2.sum(axis=(1, 2, 3), keepdims=True) / npix
            return bri * g1

        return [(np.clip(y4, 0.0, 1.0), pullback)]


def _hue_matrix(shift: float) -> np.ndarray:
    t = 2.0 * math.pi * shift
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    return _YIQ_INV @ rot @ _YIQ


@register
class ChannelShuffle(Augmentation):
    """Swaps the green and blue channels."""

    name = "channel_shuffle"

    def _apply(self, x, rngs, ctx):
        if x.shape[1] != 3:
            raise DimensionError("channel_shuffle needs 3-channel input")
        perm = [0, 2, 1]
        return [(x[:, perm], lambda g: g[:, perm])]


@register
class FancyPCA(Augmentation):
    """Adds ``sum_k alpha_k * lambda_k * p_k`` from the image's RGB covariance.

    The eigenbasis depends on the input, so the pullback is straight-through.
    """

    name = "fancy_pca"
    defaults = {"std": 0.1}
    differentiable = False

    def validate(self):
        self._require(self.params["std"] >= 0.0, "std must be >= 0")

    def _apply(self, x, rngs, ctx):
        if x.shape[1] != 3:
            raise DimensionError("fancy_pca needs 3-channel input")
        out = np.empty_like(x)
        for b, gen in enumerate(rngs):
            pix = x[b].reshape(3, -1)
            lam, vec = np.linalg.eigh(np.cov(pix))
            alpha = gen.normal(0.0, self.params["std"], size=3)
            delta = vec @ (alpha * np.maximum(lam, 0.0))
            out[b] = x[b] + delta[:, None, None]
        return [(np.clip(out, 0.0, 1.0), _identity)]


def _box_size(H, W, area, aspect):
    h = round_half_up(math.sqrt(area * H * W * aspect))
    w = round_half_up(math.sqrt(area * H * W / aspect))
    return h, w


@register
class Cutout(Augmentation):
    """Zeroes a random rectangle centred anywhere in the image (clipped at borders)."""

    name = "cutout"
    defaults = {"area_min": 0.02, "area_max": 0.4, "aspect_min": 0.4, "aspect_max": 2.5, "fill": 0.0}

    def validate(self):
        p = self.params
        self._require(0.0 < p["area_min"] <= p["area_max"] <= 1.0, "area range must lie in (0, 1]")
        self._require(0.0 < p["aspect_min"] <= p["aspect_max"], "aspect range must be positive")
        self._require(0.0 <= p["fill"] <= 1.0, "fill must lie in [0, 1]")

    def _apply(self, x, rngs, ctx):
        B, C, H, W = x.shape
        p = self.params
        keep = np.ones((B, 1, H, W), dtype=bool)
        for b, gen in enumerate(rngs):
            area = gen.uniform(p["area_min"], p["area_max"])
            aspect = math.exp(gen.uniform(math.log(p["aspect_min"]), math.log(p["aspect_max"])))
            h, w = _box_size(H, W, area, aspect)
            cy, cx = int(gen.integers(0, H)), int(gen.integers(0, W))
            keep[b, 0, max(cy - h // 2, 0) : cy - h // 2 + h, max(cx - w // 2, 0) : cx - w // 2 + w] = False
        out = np.where(keep, x, p["fill"])
        _, pb = _masked(x, np.broadcast_to(keep, x.shape))
        return [(out, pb)]


@register
class RandomErase(Augmentation):
    """Replaces a random in-bounds rectangle with uniform random pixels."""

    name = "random_erase"
    defaults = {"area_min": 0.02, "area_max": 0.2, "aspect_min": 0.3, "aspect_max": 3.3}

    def validate(self):
        p = self.params
        self._require(0.0 < p["area_min"] <= p["area_max"] <= 1.0, "area range must lie in (0, 1]")
        self._require(0.0 < p["aspect_min"] <= p["aspect_max"], "aspect range must be positive")

    def _apply(self, x, rngs, ctx):
        B, C, H, W = x.shape
        p = self.params
        out = x.copy()
        keep = np.ones_like(x, dtype=bool)
        for b, gen in enumerate(rngs):
            for _ in range(10):
                area = gen.uniform(p["area_min"], p["area_max"])
                aspect = math.exp(gen.uniform(math.log(p["aspect_min"]), math.log(p["aspect_max"])))
                h, w = _box_size(H, W, area, aspect)
                if 0 < h <= H and 0 < w <= W:
                    top, left = int(gen.integers(0, H - h + 1)), int(gen.integers(0, W - w + 1))
                    out[b, :, top : top + h, left : left + w] = gen.uniform(0.0, 1.0, size=(C, h, w))
                    keep[b, :, top : top + h, left : left + w] = False
                    break
        _, pb = _masked(x, keep)
        return [(out, pb)]


class _KernelFilter(Augmentation):
    clip = False

    def kernel(self) -> Kernel2D:
        raise NotImplementedError

    def _apply(self, x, rngs, ctx):
        k = self.kernel()
        y = conv2d_same(x, k)
        if not self.clip:
            return [(y, lambda g: conv2d_same_adjoint(g, k))]
        inside = ((y > 0.0) & (y < 1.0)).astype(np.float64)
        return [(np.clip(y, 0.0, 1.0), lambda g: conv2d_same_adjoint(g * inside, k))]


@register
class Sharpen(_KernelFilter):
    """Edge enhancement with a fixed 3x3 mask (centre 5, neighbours -0.5), clipped."""

    name = "sharpen"
    clip = True

    def kernel(self):
        return SHARPEN_MASK


@register
class GaussianBlur(_KernelFilter):
    name = "gaussian_blur"
    defaults = {"size": 3, "sigma": 1.0}
    int_params = ("size",)

    def validate(self):
        self._require(self.params["size"] >= 1 and self.params["size"] % 2 == 1, "size must be odd")
        self._require(self.params["sigma"] > 0.0, "sigma must be positive")

    def kernel(self):
        return gaussian_kernel(self.params["size"], self.params["sigma"])


@register
class HorizontalFlip(Augmentation):
    name = "horizontal_flip"
    defaults = {"p": 1.0}

    def validate(self):
        self._require(0.0 <= self.params["p"] <= 1.0, "p must lie in [0, 1]")

    def _apply(self, x, rngs, ctx):
        H, W = x.shape[2:]
        r, c = _grid(H, W)
        flip, same = r * W + (W - 1 - c), r * W + c
        src = np.stack([flip if g.random() < self.params["p"] else same for g in rngs])
        return [_remap(x, src)]


@register
class RandomCrop(Augmentation):
    """Random-resized crop: area fraction and aspect ratio drawn, resized back."""

    name = "random_crop"
    defaults = {"scale_min": 0.5, "scale_max": 1.0, "ratio_min": 0.75, "ratio_max": 4.0 / 3.0}

    def validate(self):
        p = self.params
        self._require(0.0 < p["scale_min"] <= p["scale_max"] <= 1.0, "scale range must lie in (0, 1]")
        self._require(0.0 < p["ratio_min"] <= p["ratio_max"], "ratio range must be positive")

    def _src(self, H, W, gen):
        p = self.params
        area = gen.uniform(p["scale_min"], p["scale_max"])
        ratio = math.exp(gen.uniform(math.log(p["ratio_min"]), math.log(p["ratio_max"])))
        ch = min(H, max(1, round_half_up(math.sqrt(area * H * W / ratio))))
        cw = min(W, max(1, round_half_up(math.sqrt(area * H * W * ratio))))
        top, left = int(gen.integers(0, H - ch + 1)), int(gen.integers(0, W - cw + 1))
        return _crop_resize_src(H, W, top, left, ch, cw)

    def _apply(self, x, rngs, ctx):
        H, W = x.shape[2:]
        return [_remap(x, np.stack([self._src(H, W, g) for g in rngs]))]


@register
class Rotation(Augmentation):
    """Rotation by a uniform angle in ``[-degrees, degrees]`` (nearest neighbour, zero fill)."""

    name = "rotation"
    defaults = {"degrees": 30.0}

    def validate(self):
        self._require(0.0 <= self.params["degrees"] <= 180.0, "degrees must lie in [0, 180]")

    def _apply(self, x, rngs, ctx):
        H, W = x.shape[2:]
        d = self.params["degrees"]
        src = np.stack([_rotate_src(H, W, math.radians(g.uniform(-d, d))) for g in rngs])
        return [_remap(x, src)]


@register
class DST(Augmentation):
    """Diverse inputs, then scaling (``m`` copies), then translation.

    The standard backbone branch; emits ``m`` samples.
    """

    name = "dst"
    defaults = {"m": 5, "p": 0.5, "min_scale": 0.8, "size": 7, "mode": "kernel"}
    int_params = ("m", "size")
    str_params = {"mode": ("kernel", "shift")}

    def validate(self):
        self._require(self.params["m"] >= 1, "m must be >= 1")
        self._parts()

    def _parts(self):
        p = self.params
        return (DiverseInputs(p=p["p"], min_scale=p["min_scale"]), Scale(m=p["m"]),
                Translate(mode=p["mode"], size=p["size"]))

    @property
    def differentiable(self):
        return self.params["mode"] == "shift"

    @property
    def multiplicity(self):
        return self.params["m"]

    def _apply(self, x, rngs, ctx):
        di, sc, tr = self._parts()
        (xd, pb_di), = di._apply(x, rngs, ctx)
        out = []
        for xs, pb_s in sc._apply(xd, rngs, ctx):
            (xt, pb_t), = tr._apply(xs, rngs, ctx)
            out.append((xt, lambda g, a=pb_t, b=pb_s: pb_di(b(a(g)))))
        return out
