"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np

from augtransfer.augcatalog import AugContext


def probe_context(x, seed=0):
    gen = np.random.default_rng(10_000 + seed)
    gallery = gen.uniform(0.0, 1.0, size=(6, *x.shape[1:]))
    origin = np.clip(x + gen.uniform(-0.03, 0.03, size=x.shape), 0.0, 1.0)
    return AugContext(origin=origin, labels=np.zeros(len(x), dtype=int), gallery=gallery,
                      gallery_labels=np.arange(6) % 3 + 1)


def pullback_fd_error(aug, seed, shape=(1, 3, 8, 8), h=1e-7):
    """Relative error between an operator's pullback and central differences.

    Uses a random point ``x``, direction ``v`` and cotangents ``g_k`` for every
    emitted sample; randomness is replayed exactly at ``x +- h v``. The step
    is small so that the difference rarely straddles the kink of a clipped
    operator (sharpen clips its output to [0, 1]).
    """
    gen = np.random.default_rng(seed)
    x = gen.uniform(0.15, 0.85, size=shape)
    v = gen.normal(size=shape)
    ctx = probe_context(x, seed)

    def run(z):
        return aug.apply(z, [np.random.default_rng([seed, b]) for b in range(shape[0])], ctx)

    pairs = run(x)
    gs = [gen.normal(size=shape) for _ in pairs]
    analytic = sum(float(np.sum(pb(g) * v)) for (_, pb), g in zip(pairs, gs))

    def F(z):
        return sum(float(np.sum(s * g)) for (s, _), g in zip(run(z), gs))

    numeric = (F(x + h * v) - F(x - h * v)) / (2 * h)
    scale = max(abs(numeric), abs(analytic), 1e-8)
    return abs(analytic - numeric) / scale


def mifgsm_oracle(grad_fn, x, epsilon, iters, mu):
    """Plain momentum iterative FGSM with no augmentation hook."""
    x = np.asarray(x, dtype=np.float64)
    adv = x.copy()
    g = np.zeros_like(x)
    alpha = epsilon / iters
    for _ in range(iters):
        grad = grad_fn(adv)
        norm = np.abs(grad).reshape(len(x), -1).sum(axis=1).reshape(-1, *([1] * (x.ndim - 1)))
        g = mu * g + grad / np.where(norm == 0, 1.0, norm)
        adv = adv + alpha * np.sign(g)
        adv = np.minimum(np.maximum(adv, x - epsilon), x + epsilon)
        adv = np.minimum(np.maximum(adv, 0.0), 1.0)
    return adv
