"""The desk-scale experimental setup: shapes data, a four-model zoo and fitness oracles.

ImageNet models see wide lighting and position variation in training and are
largely invariant to it. The desk zoo gets the same invariances from a
training-time augmentation (brightness scaling, one-pixel shifts, flips), so
that brightness-scaled copies stay in distribution just as they do at full
scale.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, benign_accuracy_on_augmented, mifgsm_batch, transferability_rate
from .augcatalog import DST, make_augmentation
from .compose import Leaf, Parallel, Serial, branch_with_dst
from .compsearch import Genome
from .models import Dataset, Model, generate_shapes_dataset, load_model, save_model, train
from .tensorcore import RngStream

log = logging.getLogger(__name__)

# Exhaustive slice standing in for the seven-way study.
SLICE_K7 = ("dst", "greyscale", "cutout", "sharpen", "admix", "color_jitter", "rotation")
SLICE_K5 = ("greyscale", "cutout", "color_jitter", "dst", "uniform_noise")
PAR_SERIAL_AUGS = ("greyscale", "cutout", "sharpen", "color_jitter")
DESK_ULTCOMBO = ("dst", "greyscale", "cutout", "sharpen", "admix", "color_jitter")


@dataclass(frozen=True)
class DeskConfig:
    n_per_class: int = 500
    classes: int = 8
    size: int = 16
    data_seed: int = 0
    split_fraction: float = 0.8
    split_seed: int = 1
    mlp_hidden: tuple = (128, 64)
    cnn_channels: tuple = (8, 8)
    mlp_epochs: int = 60
    cnn_epochs: int = 12
    lr: float = 0.01
    min_brightness: float = 0.0625
    max_shift: int = 1
    zoo: tuple = (("mlp_a", "mlp", 1), ("mlp_b", "mlp", 2), ("cnn_a", "smallcnn", 3), ("cnn_b", "smallcnn", 4))
    gallery_size: int = 500
    # At 16 px a 7x7 translation kernel spans half the image; 3x3 is the
    # smallest non-trivial kernel.
    ti_size: int = 3
    epsilon: float = 16.0 / 255.0
    iters: int = 10

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def train_augment(cfg: DeskConfig):
    """Minibatch augmentation used when training the zoo."""

    def augment(x, gen):
        B = len(x)
        x = x * gen.uniform(cfg.min_brightness, 1.0, size=(B, 1, 1, 1))
        if cfg.max_shift:
            shifts = gen.integers(-cfg.max_shift, cfg.max_shift + 1, size=(B, 2))
            x = np.stack([np.roll(x[b], tuple(shifts[b]), axis=(1, 2)) for b in range(B)])
        flip = gen.random(B) < 0.5
        x[flip] = x[flip][..., ::-1]
        return x

    return augment


@dataclass
class DeskSetup:
    config: DeskConfig
    train_set: Dataset
    test_set: Dataset
    zoo: dict = field(default_factory=dict)

    @property
    def gallery(self):
        return self.train_set.images[: self.config.gallery_size], self.train_set.labels[: self.config.gallery_size]

    def dst(self) -> DST:
        return DST(size=self.config.ti_size)

    def attack_config(self, **kw) -> AttackConfig:
        return AttackConfig(epsilon=kw.pop("epsilon", self.config.epsilon), iters=kw.pop("iters", self.config.iters),
                            **kw)

    def samples(self, seed: int, n: int):
        """``n`` test images drawn without replacement by ``seed``."""
        if n > len(self.test_set):
            raise ValueError(f"only {len(self.test_set)} test images available")
        idx = np.sort(RngStream(seed).derive("desk-samples").generator().permutation(len(self.test_set))[:n])
        return self.test_set.images[idx], self.test_set.labels[idx], idx

    def targets(self, surrogate: str) -> list:
        return [m for k, m in self.zoo.items() if k != surrogate]

    def attack(self, surrogate: str, comp, seed: int, n: int, cfg: AttackConfig | None = None):
        """Attack ``n`` seeded samples; returns ``(mean transfer %, trace, adv, xs, ys)``."""
        xs, ys, idx = self.samples(seed, n)
        gx, gy = self.gallery
        adv, trace = mifgsm_batch(self.zoo[surrogate], xs, ys, cfg or self.attack_config(), comp,
                                  RngStream(seed).derive("desk-attack"), gx, gy, sample_ids=idx)
        rate = float(np.mean([transferability_rate(adv, ys, t, benign=xs) for t in self.targets(surrogate)]))
        return rate, trace, adv, xs, ys

    def benign_accuracy(self, surrogate: str, comp, seed: int, n: int) -> float:
        xs, ys, _ = self.samples(seed, n)
        gx, gy = self.gallery
        return benign_accuracy_on_augmented(self.zoo[surrogate], xs, ys, comp, RngStream(seed).derive("benign"),
                                            gx, gy)


def build_desk(cfg: DeskConfig | None = None, cache_dir=None) -> DeskSetup:
    """Generate the dataset and train (or load cached) zoo models."""
    cfg = cfg or DeskConfig()
    data = generate_shapes_dataset(cfg.n_per_class, cfg.classes, cfg.size, rng=cfg.data_seed)
    tr, te = data.split(cfg.split_fraction, rng=cfg.split_seed)
    setup = DeskSetup(cfg, tr, te)
    root = None if cache_dir is None else Path(cache_dir) / f"desk-{cfg.digest()}"
    aug = train_augment(cfg)
    for name, arch, seed in cfg.zoo:
        path = None if root is None else root / name
        if path is not None and (path / "manifest.json").exists():
            setup.zoo[name] = load_model(path)
            continue
        model = Model.create(arch, data.input_shape, cfg.classes, rng=seed, hidden=cfg.mlp_hidden,
                             channels=cfg.cnn_channels)
        epochs = cfg.mlp_epochs if arch == "mlp" else cfg.cnn_epochs
        model = train(model, tr, epochs=epochs, lr=cfg.lr, rng=seed, augment=aug)
        model.meta["test_accuracy"] = model.accuracy(te.images, te.labels)
        log.info("desk model %s: test accuracy %.3f", name, model.meta["test_accuracy"])
        if path is not None:
            save_model(model, path)
        setup.zoo[name] = model
    return setup


# ---------------------------------------------------------------------------
# Compositions and oracles
# ---------------------------------------------------------------------------


def gaussian_composition(n: int = 20, sigma: float = 0.03):
    """``n`` independent Gaussian-noise samples in parallel."""
    leaf = Leaf(make_augmentation("gaussian_noise", sigma=sigma))
    return leaf if n == 1 else Parallel((leaf,) * n)


def cosine_study_compositions(setup: DeskSetup) -> dict:
    """Fixed set of attacks for the gradient-smoothness study."""
    dst = setup.dst()
    return {
        "none": Leaf(make_augmentation("identity")),
        "diverse_inputs": Leaf(make_augmentation("diverse_inputs")),
        "translate": Leaf(make_augmentation("translate", size=setup.config.ti_size)),
        "scale": Leaf(make_augmentation("scale")),
        "admix": Leaf(make_augmentation("admix")),
        "dst": Leaf(dst),
        "gaussian": gaussian_composition(),
        "ultcombo": branch_with_dst(DESK_ULTCOMBO, dst=dst),
    }


def parallel_and_serial(setup: DeskSetup, augs=PAR_SERIAL_AUGS):
    """``[a > dst, b > dst, ...]`` versus ``a > b > ... > dst``."""
    dst = setup.dst()
    par = branch_with_dst(augs, dst=dst)
    ser = Serial(tuple(Leaf(make_augmentation(a)) for a in augs) + (Leaf(dst),))
    return par, ser


def genome_fitness(setup: DeskSetup, names, surrogate: str = "mlp_a", seeds=(0,), n: int = 200):
    """Oracle mapping a genome to mean transferability over ``seeds``."""
    dst = setup.dst()

    def oracle(g: Genome) -> float:
        node = g.decode(names, dst=dst)
        return float(np.mean([setup.attack(surrogate, node, s, n)[0] for s in seeds]))

    return oracle


def fitness_table(setup: DeskSetup, names, surrogate: str = "mlp_a", seeds=(0,), n: int = 200,
                  cache_dir=None) -> dict:
    """``{genome string: fitness}`` over all ``2**k`` genomes, averaged over ``seeds``.

    Each seed's table is cached as JSON on its own, so adding seeds reuses
    earlier work.
    """
    k = len(names)
    per_seed = []
    for seed in seeds:
        key = hashlib.sha256(json.dumps([setup.config.digest(), list(names), surrogate, [seed], n]).encode())
        path = None if cache_dir is None else Path(cache_dir) / f"fitness-{key.hexdigest()[:16]}.json"
        if path is not None and path.exists():
            per_seed.append(json.loads(path.read_text()))
            continue
        oracle = genome_fitness(setup, names, surrogate, (seed,), n)
        table = {str(g): oracle(g) for g in (Genome.from_int(v, k) for v in range(2 ** k))}
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(table, sort_keys=True))
        per_seed.append(table)
    return {g: float(np.mean([t[g] for t in per_seed])) for g in per_seed[0]}
