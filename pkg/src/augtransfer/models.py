"""Tiny numpy classifiers with analytic backprop, SGD training and a procedural dataset.

Two architectures are provided:

* ``mlp``: flatten -> dense -> ReLU -> dense -> ReLU -> dense
* ``smallcnn``: conv3x3 -> ReLU -> conv3x3 -> ReLU -> maxpool2 -> dense

Both expose per-sample cross-entropy ``loss`` and its exact gradient with
respect to the input, which is all the attack needs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensorcore import load_tensor, save_tensor

log = logging.getLogger(__name__)

ARCHITECTURES = ("mlp", "smallcnn")

# Fixed input standardization applied inside every model.
INPUT_MEAN = 0.5
INPUT_SCALE = 4.0


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if hasattr(rng, "generator"):
        return rng.generator()
    return np.random.default_rng(rng)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _im2col(xp: np.ndarray, kh: int, kw: int, H: int, W: int) -> np.ndarray:
    # xp: [B, C, H+kh-1, W+kw-1] -> [B*H*W, C*kh*kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B, C, H, W, kh, kw]
    B, C = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * kh * kw)


def _conv_forward(x, w, b):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    cols = _im2col(xp, kh, kw, H, W)
    out = cols @ w.reshape(O, -1).T + b
    return out.reshape(B, H, W, O).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, x_shape, w):
    B, C, H, W = x_shape
    O, _, kh, kw = w.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(B * H * W, O)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(O, -1)).reshape(B, H, W, C, kh, kw)
    dxp = np.zeros((B, C, H + kh - 1, W + kw - 1))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + H, j : j + W] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, kh // 2 : kh // 2 + H, kw // 2 : kw // 2 + W], dw, db


@dataclass(eq=False)
class Model:
    """A classifier over ``input_shape`` images with ``num_classes`` logits.

    Parameters are never mutated in place after construction; training
    returns a new ``Model``.
    """

    arch: str
    input_shape: tuple
    num_classes: int
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.input_shape = tuple(int(s) for s in self.input_shape)

    # -- construction -----------------------------------------------------

    @classmethod
    def create(cls, arch, input_shape, num_classes, rng=0, hidden=(64, 32), channels=(8, 8)):
        gen = _rng(rng)
        C, H, W = input_shape
        p = {}
        if arch == "mlp":
            sizes = [C * H * W, *hidden, num_classes]
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                p[f"w{i}"] = gen.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
                p[f"b{i}"] = np.zeros(b)
        elif arch == "smallcnn":
            c1, c2 = channels
            p["conv0_w"] = gen.normal(0.0, np.sqrt(2.0 / (C * 9)), size=(c1, C, 3, 3))
            p["conv0_b"] = np.zeros(c1)
            p["conv1_w"] = gen.normal(0.0, np.sqrt(2.0 / (c1 * 9)), size=(c2, c1, 3, 3))
            p["conv1_b"] = np.zeros(c2)
            flat = c2 * (H // 2) * (W // 2)
            p["dense_w"] = gen.normal(0.0, np.sqrt(1.0 / flat), size=(flat, num_classes))
            p["dense_b"] = np.zeros(num_classes)
        else:
            raise ValueError(f"unknown architecture {arch!r}")
        return cls(arch, input_shape, num_classes, p)

    def with_params(self, params) -> "Model":
        return Model(self.arch, self.input_shape, self.num_classes, dict(params), dict(self.meta))

    # -- forward / backward ---------------------------------------------------

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match model {self.input_shape}")
        return x, single

    def _forward(self, x):
        p = self.params
        x = (x - INPUT_MEAN) * INPUT_SCALE
        if self.arch == "mlp":
            h = x.reshape(len(x), -1)
            acts = [h]
            n = len(p) // 2
            for i in range(n):
                h = h @ p[f"w{i}"] + p[f"b{i}"]
                if i < n - 1:
                    h = np.maximum(h, 0.0)
                acts.append(h)
            return h, acts
        a0, cols0 = _conv_forward(x, p["conv0_w"], p["conv0_b"])
        r0 = np.maximum(a0, 0.0)
        a1, cols1 = _conv_forward(r0, p["conv1_w"], p["conv1_b"])
        r1 = np.maximum(a1, 0.0)
        B, O, H, W = r1.shape
        Hp, Wp = H // 2, W // 2
        blocks = r1[:, :, : 2 * Hp, : 2 * Wp].reshape(B, O, Hp, 2, Wp, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, O, Hp, Wp, 4)
        arg = blocks.argmax(axis=-1)
        pooled = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        flat = pooled.reshape(B, -1)
        logits = flat @ p["dense_w"] + p["dense_b"]
        cache = (x, cols0, a0, r0, cols1, a1, arg, flat)
        return logits, cache

    def _backward(self, cache, dlogits, want_params=True):
        p = self.params
        grads = {}
        if self.arch == "mlp":
            acts = cache
            n = len(p) // 2
            d = dlogits
            for i in reversed(range(n)):
                if i < n - 1:
                    d = d * (acts[i + 1] > 0)
                if want_params:
                    grads[f"w{i}"] = acts[i].T @ d
                    grads[f"b{i}"] = d.sum(axis=0)
                d = d @ p[f"w{i}"].T
            return d, grads
        x, cols0, a0, r0, cols1, a1, arg, flat = cache
        if want_params:
            grads["dense_w"] = flat.T @ dlogits
            grads["dense_b"] = dlogits.sum(axis=0)
        dflat = dlogits @ p["dense_w"].T
        B, O, H, W = a1.shape
        Hp, Wp = H // 2, W // 2
        dpooled = dflat.reshape(B, O, Hp, Wp)
        dblocks = np.zeros((B, O, Hp, Wp, 4))
        np.put_along_axis(dblocks, arg[..., None], dpooled[..., None], axis=-1)
        dblocks = dblocks.reshape(B, O, Hp, Wp, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dr1 = np.zeros_like(a1)
        dr1[:, :, : 2 * Hp, : 2 * Wp] = dblocks.reshape(B, O, 2 * Hp, 2 * Wp)
        da1 = dr1 * (a1 > 0)
        dr0, dw1, db1 = _conv_backward(da1, cols1, r0.shape, p["conv1_w"])
        da0 = dr0 * (a0 > 0)
        dx, dw0, db0 = _conv_backward(da0, cols0, x.shape, p["conv0_w"])
        if want_params:
            grads.update(conv1_w=dw1, conv1_b=db1, conv0_w=dw0, conv0_b=db0)
        return dx.reshape(x.shape), grads

    def _check_labels(self, y, n):
        y = np.atleast_1d(np.asarray(y))
        if y.shape != (n,):
            y = np.broadcast_to(y, (n,))
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValueError("labels must be integers")
            y = y.astype(np.int64)
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValueError(f"label out of range [0, {self.num_classes})")
        return y

    # -- public API -------------------------------------------------------

    def logits(self, x) -> np.ndarray:
        xb, single = self._batch(x)
        z, _ = self._forward(xb)
        return z[0] if single else z

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def loss_and_grad(self, x, y):
        """Per-sample cross-entropy and its gradient with respect to ``x``."""
        xb, single = self._batch(x)
        yb = self._check_labels(y, len(xb))
        z, cache = self._forward(xb)
        logp = _log_softmax(z)
        losses = -logp[np.arange(len(xb)), yb]
        dz = np.exp(logp)
        dz[np.arange(len(xb)), yb] -= 1.0
        dx, _ = self._backward(cache, dz, want_params=False)
        dx = dx.reshape(xb.shape) * INPUT_SCALE
        if single:
            return float(losses[0]), dx[0]
        return losses, dx

    def loss(self, x, y):
        xb, single = self._batch(x)
        yb = self._check_labels(y, len(xb))
        z, _ = self._forward(xb)
        losses = -_log_softmax(z)[np.arange(len(xb)), yb]
        return float(losses[0]) if single else losses

    def grad_input(self, x, y) -> np.ndarray:
        return self.loss_and_grad(x, y)[1]

    def accuracy(self, images, labels) -> float:
        pred = np.concatenate([self.predict(images[i : i + 256]) for i in range(0, len(images), 256)])
        return float(np.mean(pred == labels))


@dataclass(eq=False)
class EnsembleSurrogate:
    """Mean-loss ensemble over members that share input shape and class count."""

    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        m0 = self.members[0]
        for m in self.members[1:]:
            if m.input_shape != m0.input_shape or m.num_classes != m0.num_classes:
                raise ValueError("ensemble members disagree on input shape or class count")

    @property
    def input_shape(self):
        return self.members[0].input_shape

    @property
    def num_classes(self):
        return self.members[0].num_classes

    def loss_and_grad(self, x, y):
        parts = [m.loss_and_grad(x, y) for m in self.members]
        losses = sum(p[0] for p in parts) / len(parts)
        grads = sum(p[1] for p in parts) / len(parts)
        return losses, grads

    def loss(self, x, y):
        return self.loss_and_grad(x, y)[0]

    def grad_input(self, x, y):
        return self.loss_and_grad(x, y)[1]

    def logits(self, x):
        return sum(m.logits(x) for m in self.members) / len(self.members)

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)


def as_ensemble(models) -> EnsembleSurrogate:
    if isinstance(models, EnsembleSurrogate):
        return models
    if isinstance(models, Model):
        return EnsembleSurrogate([models])
    return EnsembleSurrogate(list(models))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be [N, C, H, W] with one label per image")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def split(self, fraction: float, rng=0):
        order = _rng(rng).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "bar", "ell")
PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.70, 0.20],
        [0.20, 0.30, 0.90],
        [0.90, 0.80, 0.15],
    ]
)


def _shape_mask(kind, size, cy, cx, radius, angle):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "circle":
        return dx * dx + dy * dy <= radius * radius
    if kind == "square":
        r = radius * 0.85
        return (np.abs(u) <= r) & (np.abs(v) <= r)
    if kind == "triangle":
        # upward triangle in the rotated frame
        return (v <= radius * 0.6) & (v >= -radius + 1.7 * np.abs(u))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= radius * radius) & (d2 >= (0.55 * radius) ** 2)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= radius
    if kind == "bar":
        return (np.abs(u) <= radius) & (np.abs(v) <= radius * 0.3)
    if kind == "ell":
        arm = radius * 0.35
        return ((np.abs(u + radius - arm) <= arm) & (np.abs(v) <= radius)) | (
            (np.abs(v - radius + arm) <= arm) & (np.abs(u) <= radius))
    arm = radius * 0.35
    return ((np.abs(u) <= arm) & (np.abs(v) <= radius)) | ((np.abs(v) <= arm) & (np.abs(u) <= radius))


def generate_shapes_dataset(n_per_class: int, classes: int, size: int, rng=0, noise: float = 0.06,
                            label_by: str = "shape") -> Dataset:
    """Geometric shapes on noisy gradient backgrounds.

    With ``label_by="shape"`` class ``i`` is ``SHAPES[i]`` drawn in a random
    color, so labels survive color changes. With ``"shape_color"`` class ``i``
    is shape ``SHAPES[i % 4]`` in color ``PALETTE[i // 4]``.
    """
    if size < 16:
        raise ValueError("size must be at least 16")
    if label_by not in ("shape", "shape_color"):
        raise ValueError(f"unknown label_by {label_by!r}")
    top = len(SHAPES) if label_by == "shape" else 4 * len(PALETTE)
    if not 2 <= classes <= top:
        raise ValueError(f"classes must lie in [2, {top}]")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    gen = _rng(rng)
    images = np.empty((classes * n_per_class, 3, size, size))
    labels = np.repeat(np.arange(classes), n_per_class)
    for n, label in enumerate(labels):
        if label_by == "shape":
            kind = SHAPES[label]
            base = gen.uniform(0.2, 0.6, size=3)
            # keep the shape visible against the background mean
            color = np.clip(base + gen.choice([-1.0, 1.0]) * gen.uniform(0.25, 0.4, size=3), 0.0, 1.0)
        else:
            kind = SHAPES[label % 4]
            color = PALETTE[label // 4] + gen.uniform(-0.12, 0.12, size=3)
            base = gen.uniform(0.2, 0.6, size=3)
        tilt = gen.uniform(-0.15, 0.15, size=(3, 2))
        yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
        bg = base[:, None, None] + tilt[:, 0, None, None] * yy + tilt[:, 1, None, None] * xx
        radius = gen.uniform(0.25, 0.4) * size
        cy, cx = gen.uniform(radius, size - radius, size=2)
        mask = _shape_mask(kind, size, cy, cx, radius, gen.uniform(-0.4, 0.4))
        img = np.where(mask[None], color[:, None, None], bg)
        img = img + gen.normal(0.0, noise, size=img.shape)
        images[n] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(model: Model, data: Dataset, epochs: int = 10, lr: float = 0.05, rng=0,
          batch_size: int = 32, momentum: float = 0.9, weight_decay: float = 0.0,
          augment=None) -> Model:
    """Minibatch SGD on mean cross-entropy; returns a new model.

    ``augment(x, generator) -> x`` optionally transforms each minibatch.
    The final training accuracy is stored in ``meta["train_accuracy"]``.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    gen = _rng(rng)
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    work = model.with_params(params)
    for epoch in range(epochs):
        order = gen.permutation(len(data))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            x, y = data.images[idx], data.labels[idx]
            if augment is not None:
                x = augment(x, gen)
            z, cache = work._forward(x)
            dz = np.exp(_log_softmax(z))
            dz[np.arange(len(idx)), y] -= 1.0
            _, grads = work._backward(cache, dz / len(idx))
            for k in params:
                g = grads[k] + weight_decay * params[k]
                velocity[k] = momentum * velocity[k] - lr * g
                params[k] += velocity[k]
    out = model.with_params(params)
    out.meta["train_accuracy"] = out.accuracy(data.images, data.labels)
    log.info("trained %s: epochs=%d train_acc=%.3f", model.arch, epochs, out.meta["train_accuracy"])
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_model(model: Model, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "params": {},
        "meta": {k: v for k, v in model.meta.items() if isinstance(v, (int, float, str))},
    }
    for name, value in sorted(model.params.items()):
        fname = f"{name}.augt"
        save_tensor(d / fname, value)
        manifest["params"][name] = {"file": fname, "shape": list(value.shape)}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_model(directory) -> Model:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {mf}")
    manifest = json.loads(mf.read_text())
    params = {}
    for name, entry in manifest["params"].items():
        t = load_tensor(d / entry["file"])
        if list(t.shape) != entry["shape"]:
            raise ValueError(f"parameter {name} has shape {t.shape}, manifest says {entry['shape']}")
        params[name] = t
    return Model(manifest["arch"], tuple(manifest["input_shape"]), manifest["num_classes"], params,
                 dict(manifest.get("meta", {})))
