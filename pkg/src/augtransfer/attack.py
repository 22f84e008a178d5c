"""Momentum iterative FGSM with an augmentation hook, projection and evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .augcatalog import AugContext
from .compose import EmissionPlan, as_node, emit_pairs
from .models import as_ensemble
from .tensorcore import RngStream

GRAD_CHUNK = 1024


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule. ``alpha`` defaults to ``epsilon / iters``."""

    epsilon: float
    iters: int = 10
    mu: float = 1.0
    alpha: float | None = None
    subset: int | None = None
    include_original: bool = False
    fixed_partners: bool = False
    targeted: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.subset is not None and self.subset < 1:
            raise ValueError("subset must be >= 1")
        if self.targeted:
            raise ValueError("targeted attacks are not supported")

    @property
    def step(self) -> float:
        return self.epsilon / self.iters if self.alpha is None else self.alpha

    @property
    def plan(self) -> EmissionPlan:
        return EmissionPlan(self.include_original, self.subset)

    @classmethod
    def undp(cls, epsilon: float) -> "AttackConfig":
        return cls(epsilon=epsilon, iters=100, mu=1.0, alpha=1.0 / 255.0)


@dataclass
class AttackTrace:
    """Per-iteration record of one attack batch (``B`` adversarial examples).

    ``cosines[t, b]`` is the cosine between the averaged gradients of
    iterations ``t`` and ``t - 1`` (NaN at ``t = 0`` or for a zero gradient).
    """

    cosines: np.ndarray
    losses: np.ndarray
    seconds: np.ndarray
    zero_grad: np.ndarray
    sample_count: int
    total_seconds: float = 0.0
    gradients: list = field(default_factory=list)

    def __len__(self):
        return len(self.seconds)

    @property
    def batch_size(self) -> int:
        return self.cosines.shape[1]

    def mean_cosine(self) -> float:
        c = self.cosines[1:]
        c = c[np.isfinite(c)]
        return float(c.mean()) if c.size else float("nan")


def project_linf(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp to the epsilon ball around ``x`` and then to the pixel range [0, 1]."""
    x_adv, x = np.asarray(x_adv, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise ValueError(f"shape mismatch {x_adv.shape} vs {x.shape}")
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def _loss_grad(model, xs, ys):
    if len(xs) <= GRAD_CHUNK:
        return model.loss_and_grad(xs, ys)
    parts = [model.loss_and_grad(xs[i : i + GRAD_CHUNK], ys[i : i + GRAD_CHUNK])
             for i in range(0, len(xs), GRAD_CHUNK)]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def averaged_gradient(model, x_adv, ys, node, streams, ctx, plan: EmissionPlan, subset_streams=None):
    """Equal-weight mean of pulled-back input gradients over emitted samples.

    Returns ``(grad [B, ...], mean loss [B])``.
    """
    B = len(x_adv)
    pairs = emit_pairs(node, x_adv, streams, ctx)
    if plan.include_pristine_original:
        pairs.insert(0, (x_adv.copy(), lambda g: g))
    n = len(pairs)
    select = np.ones((n, B), dtype=bool)
    if plan.subset is not None and plan.subset < n:
        select[:] = False
        for b in range(B):
            pick = subset_streams[b].generator().choice(n, size=plan.subset, replace=False)
            select[pick, b] = True
    rows = [np.flatnonzero(select[k]) for k in range(n)]
    xs = np.concatenate([pairs[k][0][rows[k]] for k in range(n)])
    yrep = np.concatenate([ys[rows[k]] for k in range(n)])
    losses, grads = _loss_grad(model, xs, yrep)

    total = np.zeros_like(x_adv)
    loss_sum = np.zeros(B)
    off = 0
    for k in range(n):
        r = rows[k]
        if len(r) == 0:
            continue
        g = np.zeros_like(x_adv)
        g[r] = grads[off : off + len(r)]
        total += pairs[k][1](g)
        loss_sum[r] += losses[off : off + len(r)]
        off += len(r)
    per = select.sum(axis=0)
    return total / per.reshape(B, 1, 1, 1), loss_sum / per


def mifgsm_batch(models, xs, ys, cfg: AttackConfig, comp, rng: RngStream | int = 0,
                 gallery=None, gallery_labels=None, sample_ids=None, keep_gradients=False):
    """Run the augmented momentum attack on a batch; returns ``(x_adv, trace)``.

    Sample ``b`` draws all of its randomness from streams keyed by
    ``sample_ids[b]``, so its adversarial example does not depend on which
    other samples share the batch. An iteration whose averaged gradient is
    exactly zero skips the l1 normalization and is flagged in the trace.
    """
    model = as_ensemble(models)
    node = as_node(comp)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    B = len(xs)
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    ids = list(range(B)) if sample_ids is None else [int(i) for i in sample_ids]
    ctx = AugContext(
        origin=xs,
        labels=ys,
        gallery=None if gallery is None else np.asarray(gallery, dtype=np.float64),
        gallery_labels=None if gallery_labels is None else np.asarray(gallery_labels),
        static_streams=[stream.derive("static", i) for i in ids] if cfg.fixed_partners else None,
    )
    plan = cfg.plan
    T = cfg.iters
    trace = AttackTrace(
        cosines=np.full((T, B), np.nan),
        losses=np.zeros((T, B)),
        seconds=np.zeros(T),
        zero_grad=np.zeros((T, B), dtype=bool),
        sample_count=plan.total_count(node),
    )
    x_adv = xs.copy()
    g = np.zeros_like(xs)
    prev = None
    start = time.perf_counter()
    for t in range(T):
        t0 = time.perf_counter()
        streams = [stream.derive("iter", t, "sample", i) for i in ids]
        sub = [stream.derive("subset", t, i) for i in ids] if plan.subset is not None else None
        gbar, loss = averaged_gradient(model, x_adv, ys, node, streams, ctx, plan, sub)
        l1 = np.abs(gbar).reshape(B, -1).sum(axis=1)
        zero = l1 == 0.0
        g = cfg.mu * g + gbar / np.where(zero, 1.0, l1).reshape(B, 1, 1, 1)
        x_adv = project_linf(x_adv + cfg.step * np.sign(g), xs, cfg.epsilon)

        flat = gbar.reshape(B, -1)
        if prev is not None:
            norms = np.linalg.norm(flat, axis=1) * np.linalg.norm(prev, axis=1)
            ok = norms > 0
            trace.cosines[t, ok] = np.clip((flat[ok] * prev[ok]).sum(axis=1) / norms[ok], -1.0, 1.0)
        prev = flat
        trace.losses[t] = loss
        trace.zero_grad[t] = zero
        trace.seconds[t] = time.perf_counter() - t0
        if keep_gradients:
            trace.gradients.append(gbar.copy())
    trace.total_seconds = time.perf_counter() - start
    return x_adv, trace


def mifgsm(models, x, y, cfg: AttackConfig, comp, rng: RngStream | int = 0, gallery=None,
           gallery_labels=None, keep_gradients=False):
    """Single-image form of :func:`mifgsm_batch`."""
    x = np.asarray(x, dtype=np.float64)
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("input must lie in [0, 1]")
    adv, trace = mifgsm_batch(models, x[None], np.array([y]), cfg, comp, rng, gallery, gallery_labels,
                              keep_gradients=keep_gradients)
    return adv[0], trace


def transferability_rate(aes, ys, target, benign=None, filter_correct: bool = True) -> float:
    """Percentage of adversarial examples the target misclassifies.

    With ``benign`` given and ``filter_correct`` on, only samples whose benign
    version the target gets right count toward the denominator.
    """
    aes = np.asarray(aes, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    if len(aes) != len(ys):
        raise ValueError("aes and labels differ in length")
    if len(aes) == 0:
        raise ValueError("cannot compute a rate over an empty set")
    keep = np.ones(len(ys), dtype=bool)
    if benign is not None and filter_correct:
        keep = _predict(target, benign) == ys
        if not keep.any():
            raise ValueError("target misclassifies every benign sample; rate undefined")
    wrong = _predict(target, aes[keep]) != ys[keep]
    return 100.0 * float(wrong.mean())


def _predict(model, xs, chunk=512):
    xs = np.asarray(xs, dtype=np.float64)
    return np.concatenate([model.predict(xs[i : i + chunk]) for i in range(0, len(xs), chunk)])


@dataclass(frozen=True)
class TimingReport:
    sample_count: int
    seconds_per_ae: float
    total_seconds: float
    n_aes: int


def timing_report(traces) -> TimingReport:
    """Wall-clock per adversarial example over one or more attack traces."""
    if isinstance(traces, AttackTrace):
        traces = [traces]
    traces = list(traces)
    counts = {t.sample_count for t in traces}
    if len(counts) != 1:
        raise ValueError("traces come from compositions with different sample counts")
    n = sum(t.batch_size for t in traces)
    total = sum(t.total_seconds for t in traces)
    return TimingReport(counts.pop(), total / n, total, n)


def benign_accuracy_on_augmented(model, xs, ys, comp, rng: RngStream | int = 0, gallery=None,
                                 gallery_labels=None) -> float:
    """Accuracy of ``model`` over all samples the composition emits from benign inputs."""
    node = as_node(comp)
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    ctx = AugContext(origin=xs, labels=ys, gallery=gallery, gallery_labels=gallery_labels)
    pairs = emit_pairs(node, xs, [stream.derive("benign", b) for b in range(len(xs))], ctx)
    correct = [(_predict(model, s) == ys) for s, _ in pairs]
    return float(np.mean(correct))
