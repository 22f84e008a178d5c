"""Monte Carlo checks of the smoothed-gradient Lipschitz bounds.

Convolving a gradient field ``f`` with a noise density gives a smoothed field
``f_hat(x) = E[f(x + z)]``. For an ``I``-Lipschitz loss and standard Gaussian
noise, ``f_hat`` is ``I * sqrt(2 / pi)``-Lipschitz. The lab estimates the
largest directional derivative of ``f_hat`` numerically and compares it with
the analytic bound, using three-valued verdicts so that Monte Carlo noise is
never reported as a violation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .attack import AttackConfig, mifgsm_batch, transferability_rate
from .tensorcore import RngStream

MIN_SAMPLES = 1000
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


def _gen(rng) -> np.random.Generator:
    return (rng if isinstance(rng, RngStream) else RngStream(int(rng))).generator()


# ---------------------------------------------------------------------------
# Fields and smoothers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientField:
    """Vector field ``f: R^n -> R^n`` evaluated on a batch ``[N, n]``.

    ``lipschitz`` is the Lipschitz constant ``I`` of the underlying scalar
    loss, which also bounds ``|f|``; ``None`` means unknown.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    dim: int
    lipschitz: float | None = None
    name: str = "field"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = np.asarray(self.fn(np.atleast_2d(x)), dtype=np.float64)
        return out[0] if single else out


def sign_field(dim: int = 1) -> GradientField:
    """Gradient of ``|x|_1``: the tight case for the Gaussian bound."""
    return GradientField(np.sign, dim, lipschitz=1.0, name="sign")


def constant_field(c) -> GradientField:
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    return GradientField(lambda x: np.broadcast_to(c, x.shape).copy(), len(c),
                         lipschitz=float(np.linalg.norm(c)), name="constant")


def linear_field(dim: int = 1) -> GradientField:
    return GradientField(lambda x: x.copy(), dim, lipschitz=None, name="linear")


def tanh_field(dim: int = 1, scale: float = 3.0) -> GradientField:
    """A smooth field with steep slope ``scale`` at the origin."""
    return GradientField(lambda x: np.tanh(scale * x), dim, lipschitz=1.0, name=f"tanh{scale:g}")


def model_field(model, y: int, x0: np.ndarray) -> GradientField:
    """Input gradient of a model's cross-entropy, flattened around the shape of ``x0``."""
    shape = np.asarray(x0).shape

    def fn(x):
        xs = x.reshape((len(x), *shape))
        _, g = model.loss_and_grad(xs, np.full(len(x), y))
        return g.reshape(len(x), -1)

    return GradientField(fn, int(np.prod(shape)), name=f"{model.arch}_loss")


@dataclass(frozen=True)
class Smoother:
    """Noise distribution plus sample budget.

    ``kind`` is ``"gaussian"`` (``scale`` is the standard deviation),
    ``"uniform"`` (``scale`` is the half-width) or ``"custom"`` (``sampler``
    draws ``[N, n]`` noise and ``A`` is the density's smoothness constant).
    """

    kind: str = "gaussian"
    scale: float = 1.0
    n_samples: int = 100_000
    sampler: Callable | None = None
    A: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "custom"):
            raise ValueError(f"unknown smoother kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.n_samples < MIN_SAMPLES:
            raise ValueError(f"n_samples must be >= {MIN_SAMPLES}")
        if self.kind == "custom" and self.sampler is None:
            raise ValueError("custom smoother needs a sampler")

    @classmethod
    def gaussian(cls, sigma: float = 1.0, n_samples: int = 100_000) -> "Smoother":
        return cls("gaussian", sigma, n_samples)

    def sample(self, gen: np.random.Generator, dim: int, n: int | None = None) -> np.ndarray:
        n = self.n_samples if n is None else n
        if self.kind == "gaussian":
            return gen.normal(0.0, self.scale, size=(n, dim))
        if self.kind == "uniform":
            return gen.uniform(-self.scale, self.scale, size=(n, dim))
        return np.asarray(self.sampler(gen, n, dim), dtype=np.float64).reshape(n, dim)


def _batched(field: GradientField, pts: np.ndarray, chunk: int = 8192) -> np.ndarray:
    return np.concatenate([field(pts[i : i + chunk]) for i in range(0, len(pts), chunk)])


def smooth_gradient(field: GradientField, smoother: Smoother, x, rng=0):
    """Monte Carlo ``f_hat(x)``; returns ``(mean, standard error)`` per coordinate."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    z = smoother.sample(_gen(rng), field.dim)
    vals = _batched(field, x[None] + z)
    return vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(len(vals))


def directional_derivative(field: GradientField, smoother: Smoother, x, u, rng=0, h: float | None = None):
    """Norm of the derivative of ``f_hat`` along unit ``u``, with its standard error.

    Central differences with common random numbers: the same noise draws
    are used at ``x + h u`` and ``x - h u``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    u = u / np.linalg.norm(u)
    h = 0.1 * smoother.scale if h is None else h
    z = smoother.sample(_gen(rng), field.dim)
    d = (_batched(field, x + h * u + z) - _batched(field, x - h * u + z)) / (2.0 * h)
    mean = d.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm > 0:
        se = float((d @ (mean / norm)).std(ddof=1) / math.sqrt(len(d)))
    else:
        se = float(np.linalg.norm(d.std(axis=0, ddof=1)) / math.sqrt(len(d)))
    return norm, se


# ---------------------------------------------------------------------------
# Lipschitz estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzEstimate:
    """Empirical lower bound on the Lipschitz constant of a scalar field."""

    value: float
    pair_ratio: float
    grad_norm: float
    probes: int
    lower_bound: bool = True


def estimate_lipschitz(J: Callable, low, high, probes: int = 1000, rng=0, grad: Callable | None = None,
                       refine_steps: int = 20) -> LipschitzEstimate:
    """Largest observed slope of ``J`` on the box ``[low, high]``.

    ``J`` maps ``[N, n]`` points to ``[N]`` values. Random pairs give
    ``|J(a) - J(b)| / |a - b|``; when ``grad`` is supplied, gradient norms at
    the probes are maximized further by a short ascent from the best probe.
    The result can only underestimate the true constant.
    """
    if probes < MIN_SAMPLES:
        raise ValueError(f"probes must be >= {MIN_SAMPLES}")
    low = np.atleast_1d(np.asarray(low, dtype=np.float64))
    high = np.atleast_1d(np.asarray(high, dtype=np.float64))
    gen = _gen(rng)
    a = gen.uniform(low, high, size=(probes, len(low)))
    b = gen.uniform(low, high, size=(probes, len(low)))
    dist = np.linalg.norm(a - b, axis=1)
    ok = dist > 0
    ratio = np.abs(np.asarray(J(a)) - np.asarray(J(b)))[ok] / dist[ok]
    pair = float(ratio.max()) if ratio.size else 0.0

    gnorm = 0.0
    if grad is not None:
        g = np.asarray(grad(a)).reshape(probes, -1)
        norms = np.linalg.norm(g, axis=1)
        best = int(np.argmax(norms))
        gnorm = float(norms[best])
        x, step = a[best].copy(), 0.05 * float(np.max(high - low))
        for _ in range(refine_steps):
            cand = np.clip(x + step * gen.normal(size=(16, len(x))), low, high)
            cn = np.linalg.norm(np.asarray(grad(cand)).reshape(16, -1), axis=1)
            k = int(np.argmax(cn))
            if cn[k] > gnorm:
                gnorm, x = float(cn[k]), cand[k]
            else:
                step *= 0.5
    return LipschitzEstimate(max(pair, gnorm), pair, gnorm, probes)


# ---------------------------------------------------------------------------
# Bound checks
# ---------------------------------------------------------------------------


def theorem_bounds(theorem: str, I: float, smoother: Smoother, A: float | None = None) -> dict:
    """Candidate bounds on the Lipschitz constant of ``f_hat``.

    T2 reports both the stated constant ``I sqrt(2) / (sqrt(pi) sigma^2)``
    and the one obtained by evaluating the integral directly,
    ``I sqrt(2) / (sqrt(pi) sigma)``. They coincide at ``sigma = 1``.
    """
    theorem = theorem.upper()
    if theorem == "T1":
        if smoother.kind != "gaussian" or smoother.scale != 1.0:
            raise ValueError("T1 applies to standard Gaussian noise (sigma = 1)")
        return {"bound": I * SQRT_2_OVER_PI}
    if theorem == "T2":
        if smoother.kind != "gaussian":
            raise ValueError("T2 applies to isotropic Gaussian noise")
        s = smoother.scale
        stated, derived = I * SQRT_2_OVER_PI / s**2, I * SQRT_2_OVER_PI / s
        return {"bound": stated, "stated_bound": stated, "derived_bound": derived}
    if theorem == "T3":
        if A is None:
            A = smoother.A
        if A is None:
            raise ValueError("T3 needs the smoothness constant A of the noise density")
        return {"bound": I * A}
    raise ValueError(f"unknown theorem {theorem!r}; expected T1, T2 or T3")


def verdict(estimate: float, se: float, bound: float, rel_tol: float = 0.05) -> str:
    """``fail`` only on a violation beyond 3 SE; ``inconclusive`` when noise hides the gap."""
    if estimate - 3.0 * se > bound:
        return FAIL
    if estimate + 3.0 * se <= bound:
        return PASS
    if 3.0 * se <= rel_tol * max(bound, 1e-12):
        return PASS
    return INCONCLUSIVE


@dataclass
class SmoothnessReport:
    theorem: str
    lipschitz: float
    bounds: dict
    max_estimate: float
    max_se: float
    verdict: str
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def bound(self) -> float:
        return self.bounds["bound"]

    def write(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["point", "direction", "estimate", "se", "bound", "verdict"])
            for r in self.rows:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4]), r[5]])


def _directions(dim: int, n_random: int, gen: np.random.Generator) -> np.ndarray:
    eye = np.eye(dim)
    rnd = gen.normal(size=(n_random, dim))
    rnd /= np.linalg.norm(rnd, axis=1, keepdims=True)
    return np.concatenate([eye, rnd])


def check_bound(field: GradientField, smoother: Smoother, theorem: str = "T1", grid=None,
                I: float | None = None, A: float | None = None, rng=0, n_directions: int = 32,
                h: float | None = None) -> SmoothnessReport:
    """Estimate ``max_{x, u} |D_u f_hat(x)|`` over ``grid`` and compare with the theorem."""
    I = field.lipschitz if I is None else I
    if I is None:
        raise ValueError("field has no known Lipschitz constant; pass I (see estimate_lipschitz)")
    bounds = theorem_bounds(theorem, I, smoother, A)
    grid = np.zeros((1, field.dim)) if grid is None else np.asarray(grid, dtype=np.float64).reshape(-1, field.dim)
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    dirs = _directions(field.dim, n_directions, stream.derive("directions").generator())
    if field.dim == 1:
        dirs = dirs[:1]  # every 1-D unit direction has the same derivative norm
    rows = []
    best = (-1.0, 0.0)
    for p, x in enumerate(grid):
        for d, u in enumerate(dirs):
            est, se = directional_derivative(field, smoother, x, u, stream.derive("point", p, d), h)
            rows.append((p, d, est, se, bounds["bound"], verdict(est, se, bounds["bound"])))
            if est > best[0]:
                best = (est, se)
    final = verdict(best[0], best[1], bounds["bound"])
    notes = []
    if "derived_bound" in bounds and smoother.scale != 1.0:
        other = verdict(best[0], best[1], bounds["derived_bound"])
        if other != final:
            notes.append(f"T2 constants disagree at sigma={smoother.scale:g}: stated bound gives {final}, "
                         f"derived bound {bounds['derived_bound']:.6g} gives {other}")
            final = INCONCLUSIVE
    return SmoothnessReport(theorem.upper(), I, bounds, best[0], best[1], final, rows, notes)


def slope_curve(field: GradientField, sigmas, n_samples: int = 100_000, grid=None, rng=0,
                n_directions: int = 32):
    """``(sigma, max estimate, se)`` for each smoothing scale."""
    out = []
    for s in sigmas:
        sm = Smoother.gaussian(s, n_samples)
        rep = check_bound(field, sm, "T2", grid=grid, I=field.lipschitz or 1.0, rng=rng,
                          n_directions=n_directions)
        out.append((float(s), rep.max_estimate, rep.max_se))
    return out


def is_monotone_in_sigma(curve, z: float = 3.0) -> bool:
    """True when no estimate rises above its predecessor beyond ``z`` combined SEs."""
    for (_, e0, s0), (_, e1, s1) in zip(curve, curve[1:]):
        if e1 > e0 + z * math.hypot(s0, s1):
            return False
    return True


# ---------------------------------------------------------------------------
# Gradient smoothness against transferability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothnessPoint:
    composition: str
    samples: int
    mean_cosine: float
    transfer: float
    zero_grad: int


def smoothness_vs_transfer(surrogate, targets, xs, ys, compositions: dict, cfg: AttackConfig,
                           rng: RngStream | int = 0, gallery=None, gallery_labels=None):
    """Attack once per composition; pair mean consecutive-gradient cosine with mean transfer.

    ``compositions`` maps a label to anything :func:`as_node` accepts.
    Returns ``(points, spearman_rho)``.
    """
    if cfg.iters < 2:
        raise ValueError("consecutive-gradient cosine needs at least 2 iterations")
    if len(compositions) < 3:
        raise ValueError("need at least 3 compositions")
    points = []
    for label, comp in compositions.items():
        adv, trace = mifgsm_batch(surrogate, xs, ys, cfg, comp, rng, gallery, gallery_labels)
        rate = float(np.mean([transferability_rate(adv, ys, t, benign=xs) for t in targets]))
        points.append(SmoothnessPoint(label, trace.sample_count, trace.mean_cosine(), rate,
                                      int(trace.zero_grad.sum())))
    rho = spearman([p.mean_cosine for p in points], [p.transfer for p in points])
    return points, rho


def spearman(a, b) -> float:
    rho = stats.spearmanr(a, b).statistic
    return float(rho)


def write_smoothness(points, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["composition", "samples", "mean_cosine", "transfer", "zero_grad"])
        for p in points:
            w.writerow([p.composition, p.samples, repr(p.mean_cosine), repr(p.transfer), p.zero_grad])
