"""Command-line entry point.

Every command writes under ``--out``: ``models/``, ``aes/``, ``reports/*.csv``,
a ``run.log`` and ``config.txt``, the fully resolved configuration. Passing
that file back with ``--config`` (and no command) replays the run.

Exit codes: 0 success, 2 configuration error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, mifgsm_batch, timing_report, transferability_rate
from .compose import CompositionSyntaxError, count_samples, format_composition, parse_composition
from .compsearch import (GeneticConfig, exhaustive_search, genetic_search, monotonicity_analysis,
                         write_monotonicity)
from .models import Dataset, Model, generate_shapes_dataset, load_model, save_model, train
from .tensorcore import RngStream, load_tensor, save_tensor
from . import theorylab

log = logging.getLogger("augtransfer")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
SEED_ENV = "AUGTRANSFER_SEED"


class ConfigError(Exception):
    """Bad flags, config values or missing inputs."""


class InvariantViolation(Exception):
    """A produced artifact breaks a guaranteed property."""


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


def parse_epsilon(text) -> float:
    """Accept ``0.0627`` or ``16/255``."""
    try:
        value = float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"invalid epsilon {text!r}") from exc
    if value <= 0:
        raise argparse.ArgumentTypeError("epsilon must be positive")
    return value


def _int_tuple(text) -> tuple:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _names(text) -> tuple:
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment; repeated keys accumulate."""
    out: dict = {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    for n, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in out:
            prev = out[key]
            out[key] = (prev if isinstance(prev, list) else [prev]) + [value]
        else:
            out[key] = value
    return out


def write_config(path, values: dict) -> None:
    lines = []
    for k in sorted(values):
        v = values[k]
        if v is None:
            continue
        for item in v if isinstance(v, list) else [v]:
            if isinstance(item, tuple):
                item = ",".join(str(i) for i in item)
            lines.append(f"{k} = {item}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Argument parser
# ---------------------------------------------------------------------------


def _common(p):
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help=f"seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--config", default=None, help="key = value file whose entries override flags")
    p.add_argument("-v", "--verbose", action="store_true")


def _attack_flags(p):
    p.add_argument("--composition", default="none", help="composition DSL, e.g. \"[greyscale>dst,dst]\"")
    p.add_argument("--epsilon", type=parse_epsilon, default=16 / 255, help="real or fraction such as 16/255")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--alpha", type=parse_epsilon, default=None, help="step size (default epsilon/iters)")
    p.add_argument("--undp", action="store_true", help="use iters=100 and alpha=1/255")
    p.add_argument("--n", type=int, default=200, help="number of images to attack")
    p.add_argument("--gallery", type=int, default=500, help="training images available as mixing partners")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augtransfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"augtransfer {__version__}")
    sub = parser.add_subparsers(dest="command")

    ds = sub.add_parser("dataset", help="generate or import a dataset")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    gen = ds_sub.add_parser("gen", help="synthetic shapes dataset")
    _common(gen)
    gen.add_argument("--n-per-class", type=int, default=500)
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--size", type=int, default=16)
    gen.add_argument("--label-by", choices=("shape", "shape_color"), default="shape")
    gen.add_argument("--split", type=float, default=0.8, help="training fraction")
    imp = ds_sub.add_parser("import", help="directory of images plus labels.csv")
    _common(imp)
    imp.add_argument("--images", help="image directory")
    imp.add_argument("--labels", default=None, help="labels manifest (default <images>/labels.csv)")
    imp.add_argument("--size", type=int, default=16)
    imp.add_argument("--classes", type=int, default=None)
    imp.add_argument("--split", type=float, default=0.8)

    tr = sub.add_parser("train", help="train a model on a dataset")
    _common(tr)
    tr.add_argument("--data", help="dataset directory")
    tr.add_argument("--arch", choices=("mlp", "smallcnn"), default="smallcnn")
    tr.add_argument("--name", default=None, help="checkpoint name under models/")
    tr.add_argument("--epochs", type=int, default=12)
    tr.add_argument("--lr", type=float, default=0.01)
    tr.add_argument("--batch-size", type=int, default=32)
    tr.add_argument("--hidden", type=_int_tuple, default=(128, 64))
    tr.add_argument("--channels", type=_int_tuple, default=(8, 8))
    tr.add_argument("--augment", type=_bool, default=True, help="brightness/shift/flip training augmentation")

    at = sub.add_parser("attack", help="craft adversarial examples")
    _common(at)
    at.add_argument("--surrogate", action="append", required=False, help="checkpoint directory (repeat for ensembles)")
    at.add_argument("--data", required=False)
    _attack_flags(at)

    ev = sub.add_parser("eval", help="transferability of stored adversarial examples")
    _common(ev)
    ev.add_argument("--aes", required=False, help="directory written by attack")
    ev.add_argument("--target", action="append", required=False, help="checkpoint directory (repeatable)")
    ev.add_argument("--no-filter", action="store_true", help="count samples the target misclassifies benignly")

    se = sub.add_parser("search", help="search over augmentation subsets")
    se_sub = se.add_subparsers(dest="action", required=True)
    for mode in ("exhaustive", "genetic"):
        sp = se_sub.add_parser(mode)
        _common(sp)
        sp.add_argument("--augs", type=_names, default=("dst", "greyscale", "cutout", "sharpen", "admix",
                                                         "color_jitter", "rotation"))
        sp.add_argument("--surrogate", required=False)
        sp.add_argument("--target", action="append", required=False)
        sp.add_argument("--data", required=False)
        sp.add_argument("--ti-size", type=int, default=3, help="translation kernel of the DST branch")
        _attack_flags(sp)
        if mode == "genetic":
            sp.add_argument("--pop", type=int, default=20)
            sp.add_argument("--gens", type=int, default=2)
            sp.add_argument("--p-cross", type=float, default=0.6)
            sp.add_argument("--p-mutate", type=float, default=0.1)
            sp.add_argument("--p-aug", type=float, default=0.55)
            sp.add_argument("--mutate-after-crossover", action="store_true")

    th = sub.add_parser("theory", help="smoothed-gradient bound checks")
    th_sub = th.add_subparsers(dest="action", required=True)
    for name in ("t1", "t2", "t3"):
        tp = th_sub.add_parser(name)
        _common(tp)
        tp.add_argument("--field", choices=("sign", "tanh", "constant"), default="sign")
        tp.add_argument("--dim", type=int, default=1)
        tp.add_argument("--samples", type=int, default=100_000)
        tp.add_argument("--grid", type=float, nargs="+", default=[-1.0, -0.5, 0.0, 0.5, 1.0],
                        help="grid coordinates (applied to every dimension)")
        tp.add_argument("--directions", type=int, default=32)
        tp.add_argument("--lipschitz", type=float, default=None)
        if name == "t2":
            tp.add_argument("--sigma", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
        if name == "t3":
            tp.add_argument("--noise", choices=("uniform", "gaussian"), default="uniform")
            tp.add_argument("--scale", type=float, default=1.0)
            tp.add_argument("--A", type=float, required=False, dest="A")
    sm = th_sub.add_parser("smoothness", help="gradient cosine against transferability")
    _common(sm)
    sm.add_argument("--surrogate", required=False)
    sm.add_argument("--target", action="append", required=False)
    sm.add_argument("--data", required=False)
    sm.add_argument("--compositions", required=False, help="';'-separated list of compositions")
    _attack_flags(sm)

    be = sub.add_parser("bench", help="seconds per adversarial example by composition")
    _common(be)
    be.add_argument("--surrogate", required=False)
    be.add_argument("--data", required=False)
    be.add_argument("--compositions", default="none;dst;gsdt;admix_dt;ultcombo")
    _attack_flags(be)
    return parser


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------


def save_dataset(data: Dataset, directory, split: float | None = None, seed: int = 0, source: str = "") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "images.augt", data.images)
    save_tensor(d / "labels.augt", data.labels.astype(np.float64))
    manifest = {"num_classes": data.num_classes, "shape": list(data.images.shape), "source": source}
    if split is not None:
        train_set, _ = data.split(split, rng=seed)
        manifest["split"] = split
        manifest["split_seed"] = seed
        manifest["n_train"] = len(train_set)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_dataset(directory):
    """Returns ``(full, train, test)``; train/test follow the stored split."""
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise ConfigError(f"dataset {d} not found (missing manifest.json)")
    manifest = json.loads(mf.read_text(encoding="utf-8"))
    images = load_tensor(d / "images.augt")
    labels = load_tensor(d / "labels.augt").astype(np.int64)
    data = Dataset(images, labels, int(manifest["num_classes"]))
    if "split" in manifest:
        tr, te = data.split(manifest["split"], rng=manifest["split_seed"])
    else:
        tr, te = data, data
    return data, tr, te


def import_images(directory, size: int = 16, labels=None, num_classes: int | None = None) -> Dataset:
    """Decode a directory of images listed in a ``filename,label`` manifest."""
    from PIL import Image, UnidentifiedImageError

    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{d} is not a directory")
    manifest = Path(labels) if labels else d / "labels.csv"
    if not manifest.exists():
        raise ConfigError(f"labels manifest {manifest} not found")
    entries = []
    with manifest.open(newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            if len(row) < 2:
                raise ConfigError(f"{manifest}: expected filename,label rows")
            name, lab = row[0].strip(), row[1].strip()
            if not lab.lstrip("-").isdigit():
                if entries:
                    raise ConfigError(f"{manifest}: label {lab!r} is not an integer")
                continue  # header row
            entries.append((name, int(lab)))
    if not entries:
        raise ConfigError(f"no images listed in {manifest}")
    k = num_classes if num_classes is not None else max(lab for _, lab in entries) + 1
    images = np.empty((len(entries), 3, size, size))
    for i, (name, lab) in enumerate(entries):
        if not 0 <= lab < k:
            raise ConfigError(f"label {lab} for {name} outside [0, {k})")
        try:
            with Image.open(d / name) as im:
                im = im.convert("RGB").resize((size, size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64) / 255.0
        except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
            raise ConfigError(f"cannot decode {d / name}: {exc}") from exc
        images[i] = arr.transpose(2, 0, 1)
    return Dataset(images, np.array([lab for _, lab in entries], dtype=np.int64), k)


def _load_model(path) -> Model:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise ConfigError(f"missing checkpoint {p}")
    return load_model(p)


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, [], ()):
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def _attack_config(args) -> AttackConfig:
    if args.undp:
        return AttackConfig.undp(args.epsilon)
    return AttackConfig(epsilon=args.epsilon, iters=args.iters, mu=args.mu, alpha=args.alpha)


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _attack_inputs(args, seed):
    _, tr, te = load_dataset(args.data)
    n = min(args.n, len(te))
    xs, ys = te.images[:n], te.labels[:n]
    gx, gy = tr.images[: args.gallery], tr.labels[: args.gallery]
    return xs, ys, gx, gy


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_dataset(args, seed, out: Path):
    if args.action == "gen":
        data = generate_shapes_dataset(args.n_per_class, args.classes, args.size, rng=seed, label_by=args.label_by)
        source = f"shapes(n_per_class={args.n_per_class}, classes={args.classes}, size={args.size})"
    else:
        _require(args, "images")
        data = import_images(args.images, args.size, args.labels, args.classes)
        source = f"import({args.images})"
    d = save_dataset(data, out / "data", split=args.split, seed=seed, source=source)
    log.info("dataset with %d images, %d classes written to %s", len(data), data.num_classes, d)


def cmd_train(args, seed, out: Path):
    from .desk import DeskConfig, train_augment

    _require(args, "data")
    _, tr, te = load_dataset(args.data)
    model = Model.create(args.arch, tr.images.shape[1:], tr.num_classes, rng=seed, hidden=args.hidden,
                         channels=args.channels)
    aug = train_augment(DeskConfig()) if args.augment else None
    model = train(model, tr, epochs=args.epochs, lr=args.lr, rng=seed, batch_size=args.batch_size, augment=aug)
    model.meta["test_accuracy"] = model.accuracy(te.images, te.labels)
    name = args.name or f"{args.arch}_s{seed}"
    save_model(model, out / "models" / name)
    _write_csv(out / "reports" / "train.csv", ["model", "arch", "train_accuracy", "test_accuracy"],
               [[name, args.arch, _fmt(model.meta["train_accuracy"]), _fmt(model.meta["test_accuracy"])]])


def cmd_attack(args, seed, out: Path):
    _require(args, "surrogate", "data")
    comp = parse_composition(args.composition)
    cfg = _attack_config(args)
    models = [_load_model(p) for p in args.surrogate]
    xs, ys, gx, gy = _attack_inputs(args, seed)
    adv, trace = mifgsm_batch(models, xs, ys, cfg, comp, RngStream(seed), gx, gy)
    gap = float(np.abs(adv - xs).max()) if len(xs) else 0.0
    if gap > cfg.epsilon + 1e-12 or adv.min() < 0.0 or adv.max() > 1.0:
        raise InvariantViolation(f"adversarial examples leave the epsilon ball (max gap {gap})")
    d = out / "aes"
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "adv.augt", adv)
    save_tensor(d / "benign.augt", xs)
    save_tensor(d / "labels.augt", ys.astype(np.float64))
    manifest = {
        "composition": format_composition(comp),
        "count_samples": count_samples(comp),
        "epsilon": cfg.epsilon,
        "iters": cfg.iters,
        "mu": cfg.mu,
        "alpha": cfg.step,
        "n": len(xs),
        "seed": seed,
        "surrogates": [str(p) for p in args.surrogate],
        "max_perturbation": gap,
        "zero_gradient_steps": int(trace.zero_grad.sum()),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rows = [[t, _fmt(np.nanmean(trace.cosines[t]) if t else float("nan")), _fmt(trace.losses[t].mean()),
             int(trace.zero_grad[t].sum())] for t in range(cfg.iters)]
    _write_csv(out / "reports" / "attack_trace.csv", ["iteration", "mean_cosine", "mean_loss", "zero_grad"], rows)
    log.info("attack: %d AEs, %d samples per step, %.3f s per AE", len(xs), trace.sample_count,
             trace.total_seconds / max(len(xs), 1))


def cmd_eval(args, seed, out: Path):
    _require(args, "aes", "target")
    d = Path(args.aes)
    if not (d / "manifest.json").exists():
        raise ConfigError(f"no adversarial examples in {d}")
    adv, xs = load_tensor(d / "adv.augt"), load_tensor(d / "benign.augt")
    ys = load_tensor(d / "labels.augt").astype(np.int64)
    rows = []
    for p in args.target:
        model = _load_model(p)
        rate = transferability_rate(adv, ys, model, benign=xs, filter_correct=not args.no_filter)
        rows.append([str(p), len(ys), _fmt(rate)])
    _write_csv(out / "reports" / "eval.csv", ["target", "n", "transferability"], rows)


def _search_oracle(args, seed):
    _require(args, "surrogate", "target", "data")
    from .augcatalog import DST

    cfg = _attack_config(args)
    surrogate = _load_model(args.surrogate)
    targets = [_load_model(p) for p in args.target]
    xs, ys, gx, gy = _attack_inputs(args, seed)
    dst = DST(size=args.ti_size)

    def oracle(g):
        node = g.decode(args.augs, dst=dst)
        adv, _ = mifgsm_batch(surrogate, xs, ys, cfg, node, RngStream(seed), gx, gy)
        return float(np.mean([transferability_rate(adv, ys, t, benign=xs) for t in targets]))

    return oracle


def cmd_search(args, seed, out: Path):
    for a in args.augs:
        parse_composition(a)  # validates the name
    oracle = _search_oracle(args, seed)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    if args.action == "exhaustive":
        rep = exhaustive_search(args.augs, oracle)
        write_monotonicity(monotonicity_analysis(rep), reports / "monotonicity.csv")
    else:
        gcfg = GeneticConfig(args.pop, args.gens, args.p_cross, args.p_mutate, args.p_aug,
                             mutate_after_crossover=args.mutate_after_crossover)
        rep = genetic_search(args.augs, gcfg, oracle, RngStream(seed))
    rep.write(reports / f"search_{args.action}.csv")


def _theory_field(args):
    if args.field == "sign":
        return theorylab.sign_field(args.dim)
    if args.field == "tanh":
        return theorylab.tanh_field(args.dim)
    return theorylab.constant_field(np.ones(args.dim))


def cmd_theory(args, seed, out: Path):
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    if args.action == "smoothness":
        _require(args, "surrogate", "target", "data", "compositions")
        comps = {c.strip(): parse_composition(c.strip()) for c in args.compositions.split(";") if c.strip()}
        xs, ys, gx, gy = _attack_inputs(args, seed)
        points, rho = theorylab.smoothness_vs_transfer(
            _load_model(args.surrogate), [_load_model(p) for p in args.target], xs, ys, comps,
            _attack_config(args), RngStream(seed), gx, gy)
        theorylab.write_smoothness(points, reports / "smoothness.csv")
        log.info("spearman(cosine, transfer) = %.4f", rho)
        return
    field = _theory_field(args)
    grid = np.repeat(np.asarray(args.grid, dtype=np.float64)[:, None], args.dim, axis=1)
    stream = RngStream(seed)
    if args.action == "t1":
        reps = [theorylab.check_bound(field, theorylab.Smoother.gaussian(1.0, args.samples), "T1", grid,
                                      I=args.lipschitz, rng=stream, n_directions=args.directions)]
    elif args.action == "t2":
        reps = [theorylab.check_bound(field, theorylab.Smoother.gaussian(s, args.samples), "T2", grid,
                                      I=args.lipschitz, rng=stream, n_directions=args.directions)
                for s in args.sigma]
    else:
        if args.A is None:
            raise ConfigError("--A is required for t3")
        sm = theorylab.Smoother(args.noise, args.scale, args.samples, A=args.A)
        reps = [theorylab.check_bound(field, sm, "T3", grid, I=args.lipschitz, A=args.A, rng=stream,
                                      n_directions=args.directions)]
    rows = []
    for rep in reps:
        for r in rep.rows:
            rows.append([rep.theorem, _fmt(rep.bounds.get("derived_bound", rep.bound)), *r[:2],
                         _fmt(r[2]), _fmt(r[3]), _fmt(r[4]), r[5]])
    _write_csv(reports / f"theory_{args.action}.csv",
               ["theorem", "alt_bound", "point", "direction", "estimate", "se", "bound", "verdict"], rows)
    _write_csv(reports / f"theory_{args.action}_summary.csv",
               ["theorem", "scale", "max_estimate", "se", "bound", "alt_bound", "verdict", "note"],
               [[r.theorem, _fmt(sm_scale), _fmt(r.max_estimate), _fmt(r.max_se), _fmt(r.bound),
                 _fmt(r.bounds.get("derived_bound", r.bound)), r.verdict, "; ".join(r.notes)]
                for r, sm_scale in zip(reps, args.sigma if args.action == "t2" else [getattr(args, "scale", 1.0)])])
    for r in reps:
        log.info("%s: estimate %.4f +- %.4f vs bound %.4f -> %s", r.theorem, r.max_estimate, r.max_se, r.bound,
                 r.verdict)
        if r.verdict == theorylab.FAIL:
            raise InvariantViolation(f"{r.theorem} bound violated beyond Monte Carlo noise")


def cmd_bench(args, seed, out: Path):
    _require(args, "surrogate", "data")
    surrogate = _load_model(args.surrogate)
    xs, ys, gx, gy = _attack_inputs(args, seed)
    cfg = _attack_config(args)
    rows = []
    for c in (c.strip() for c in args.compositions.split(";")):
        if not c:
            continue
        comp = parse_composition(c)
        _, trace = mifgsm_batch(surrogate, xs, ys, cfg, comp, RngStream(seed), gx, gy)
        rep = timing_report(trace)
        rows.append([c, rep.sample_count, _fmt(rep.seconds_per_ae), rep.n_aes])
    _write_csv(out / "reports" / "bench.csv", ["composition", "augmented_samples", "seconds_per_ae", "n"], rows)


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval,
            "search": cmd_search, "theory": cmd_theory, "bench": cmd_bench}


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def _subparser(parser, args):
    sp = parser._subparsers._group_actions[0].choices[args.command]
    if getattr(args, "action", None):
        sp = sp._subparsers._group_actions[0].choices[args.action]
    return sp


def _apply_config(parser, args, values: dict, keep=()):
    """Override parsed flags with config entries, converting with each flag's type."""
    sp = _subparser(parser, args)
    actions = {a.dest: a for a in sp._actions}
    for key, raw in values.items():
        if key in ("command", "action") or key in keep:
            continue
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        act = actions[key]
        items = raw if isinstance(raw, list) else [raw]
        if isinstance(act, argparse._StoreTrueAction):
            val = _bool(items[-1])
        elif isinstance(act, argparse._AppendAction):
            val = [act.type(i) if act.type else i for i in items]
        elif act.nargs in ("+", "*"):
            conv = act.type or str
            val = [conv(t) for t in " ".join(items).replace(",", " ").split()]
        else:
            try:
                val = act.type(items[-1]) if act.type else items[-1]
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
            if act.choices is not None and val not in act.choices:
                raise ConfigError(f"config key {key}: {val!r} not in {sorted(act.choices)}")
        setattr(args, key, val)


def resolve_seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return 0


def _resolved(args) -> dict:
    skip = {"config", "verbose"}
    out = {k: v for k, v in vars(args).items() if k not in skip}
    for k, v in list(out.items()):
        if isinstance(v, float):
            out[k] = repr(v)
        elif isinstance(v, bool):
            out[k] = "true" if v else "false"
    return out


def _setup_logging(out: Path, verbose: bool):
    root = logging.getLogger("augtransfer")
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    root.addHandler(fh)
    root.addHandler(sh)
    return fh, sh


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    keep = ()
    try:
        if argv[:1] == ["--config"] and len(argv) >= 2:
            # replay: the archived config names its own command; an explicit
            # --out redirects the outputs
            values = read_config(argv[1])
            if "command" not in values:
                raise ConfigError(f"{argv[1]} does not name a command")
            argv = [values["command"]] + ([values["action"]] if "action" in values else []) + argv
            keep = ("out",) if "--out" in argv else ()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_CONFIG
        if args.config:
            _apply_config(parser, args, read_config(args.config), keep)
        seed = resolve_seed(args)
        args.seed = seed
    except ConfigError as exc:
        print(f"augtransfer: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handlers = _setup_logging(out, args.verbose)
    log.info("augtransfer %s, python %s, numpy %s, seed %d", __version__, platform.python_version(),
             np.__version__, seed)
    log.info("command: %s", " ".join(argv))
    write_config(out / "config.txt", _resolved(args))
    try:
        COMMANDS[args.command](args, seed, out)
    except (ConfigError, CompositionSyntaxError, KeyError, ValueError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (InvariantViolation, FloatingPointError) as exc:
        log.error("invariant violation: %s", exc)
        return EXIT_INVARIANT
    finally:
        for h in handlers:
            logging.getLogger("augtransfer").removeHandler(h)
            h.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
