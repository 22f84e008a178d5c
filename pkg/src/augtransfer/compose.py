"""Parallel and serial composition of augmentations, plus the composition DSL.

DSL grammar::

    expr   := term (('>' | '▸') term)*
    term   := NAME args? | '[' expr (',' expr)* ']' | '(' expr ')'
    args   := '(' [key '=' value (',' key '=' value)*] ')'
    value  := number | number '/' number | NAME

``a > b`` pipes every output of ``a`` into ``b``; ``[a, b]`` applies ``a`` and
``b`` to the same input and unions their outputs. NAME is a catalog operator
or a preset (``dst``, ``gsdt``, ``admix_dt``, ``undp``, ``ultcombo``, ``none``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .augcatalog import CATALOG, DST, AugContext, Augmentation, make_augmentation
from .tensorcore import RngStream


class CompositionSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


# ---------------------------------------------------------------------------
# Tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    aug: Augmentation


@dataclass(frozen=True)
class Serial:
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("serial composition needs at least one child")
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Parallel:
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("parallel composition needs at least one child")
        object.__setattr__(self, "children", tuple(self.children))


CompositionNode = Leaf | Serial | Parallel


def as_node(item) -> CompositionNode:
    if isinstance(item, (Leaf, Serial, Parallel)):
        return item
    if isinstance(item, Augmentation):
        return Leaf(item)
    if isinstance(item, str):
        return parse_composition(item)
    raise TypeError(f"cannot build a composition from {item!r}")


def count_samples(node: CompositionNode) -> int:
    if isinstance(node, Leaf):
        return node.aug.multiplicity
    counts = [count_samples(c) for c in node.children]
    if isinstance(node, Serial):
        return int(np.prod(counts))
    return sum(counts)


def leaves(node: CompositionNode):
    if isinstance(node, Leaf):
        yield node.aug
    else:
        for c in node.children:
            yield from leaves(c)


def is_differentiable(node: CompositionNode) -> bool:
    return all(a.differentiable for a in leaves(node))


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _chain(outer, inner):
    return lambda g: outer(inner(g))


def emit_pairs(node: CompositionNode, x: np.ndarray, streams: list, ctx: AugContext | None = None):
    """Emit ``(sample, pullback)`` pairs for a batch ``x`` of shape ``[B, C, H, W]``.

    ``streams`` holds one :class:`RngStream` per batch element. Branches and
    serial stages derive their own sub-streams, so every random draw is a
    function of (stream, position in the tree) only.
    """
    ctx = ctx or AugContext()
    if isinstance(node, Leaf):
        return node.aug.apply(x, [s.generator() for s in streams], ctx)
    if isinstance(node, Parallel):
        out = []
        for j, child in enumerate(node.children):
            out.extend(emit_pairs(child, x, [s.derive("par", j) for s in streams], ctx))
        return out
    current = [(x, lambda g: g)]
    for i, child in enumerate(node.children):
        nxt = []
        for k, (xs, pb) in enumerate(current):
            # randomness is re-drawn for every upstream sample
            for y, pb2 in emit_pairs(child, xs, [s.derive("ser", i, k) for s in streams], ctx):
                nxt.append((y, _chain(pb, pb2)))
        current = nxt
    return current


@dataclass(frozen=True)
class EmissionPlan:
    """How emitted samples feed the gradient average.

    All kept samples get equal weight. ``include_pristine_original`` adds an
    untransformed copy of the input; ``subset`` keeps a uniform random subset
    of that many samples, redrawn every call.
    """

    include_pristine_original: bool = False
    subset: int | None = None

    def total_count(self, node: CompositionNode) -> int:
        n = count_samples(node) + int(self.include_pristine_original)
        return n if self.subset is None else min(self.subset, n)


def emit(node, x, rng: RngStream | int = 0, ctx: AugContext | None = None,
         include_original: bool = False) -> list[np.ndarray]:
    """Emit augmented samples for one image ``[C, H, W]`` (or a batch)."""
    node = as_node(node)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    streams = [stream.derive("sample", b) for b in range(len(xb))] if not single else [stream]
    samples = [s for s, _ in emit_pairs(node, xb, streams, ctx)]
    if include_original:
        samples.insert(0, xb.copy())
    return [s[0] for s in samples] if single else samples


# ---------------------------------------------------------------------------
# Builders and presets
# ---------------------------------------------------------------------------


def _as_aug(a) -> Augmentation:
    if isinstance(a, Augmentation):
        return a
    if isinstance(a, Leaf):
        return a.aug
    return make_augmentation(a)


def branch_with_dst(augs, dst: DST | None = None) -> CompositionNode:
    """Parallel composition of ``aug > dst`` branches.

    A ``dst`` entry in ``augs`` contributes the plain DST branch (``dst``
    itself unless the entry carries its own parameters); an empty list
    yields plain DST. Admix is given ``m=1`` inside its branch because
    DST already supplies the ``1/2**i`` copies.
    """
    dst = dst or DST()
    augs = [_as_aug(a) for a in augs]
    if not augs:
        return Leaf(dst)
    branches = []
    for a in augs:
        if a.name == "dst":
            branches.append(Leaf(a if a.overrides else dst))
            continue
        if a.name == "admix" and a.params["m"] != 1:
            a = a.with_params(m=1)
        branches.append(Serial((Leaf(a), Leaf(dst))))
    return branches[0] if len(branches) == 1 else Parallel(tuple(branches))


# Operators standing in for the seven-way exhaustive slice; the two that need
# pretrained generators are replaced by catalog operators.
ULTCOMBO_AUGS = ("dst", "greyscale", "cutout", "sharpen", "admix", "color_jitter")


def preset(name: str) -> CompositionNode:
    if name == "none":
        return Leaf(make_augmentation("identity"))
    if name == "dst":
        return Leaf(DST())
    if name == "gsdt":
        return branch_with_dst(["greyscale", "dst"])
    if name == "admix_dt":
        return branch_with_dst([make_augmentation("admix", n_mix=3)], dst=DST(size=9))
    if name == "undp":
        return Serial(tuple(Leaf(make_augmentation(n)) for n in
                            ("uniform_noise", "drop_patch", "diverse_inputs", "translate")))
    if name == "ultcombo":
        return branch_with_dst(ULTCOMBO_AUGS)
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("none", "dst", "gsdt", "admix_dt", "undp", "ultcombo")


# ---------------------------------------------------------------------------
# DSL
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<sym>[\[\](),=/>▸]))"
)


def _byte_offset(text: str, i: int) -> int:
    return len(text[:i].encode("utf-8"))


def _tokenize(text: str):
    toks = []
    i = 0
    while i < len(text):
        if text[i].isspace():
            i += 1
            continue
        m = _TOKEN.match(text, i)
        if not m or m.end() == i:
            raise CompositionSyntaxError(f"unexpected character {text[i]!r}", _byte_offset(text, i))
        kind = m.lastgroup
        val = m.group(kind)
        start = m.start(kind)
        if val == "▸":
            val = ">"
        toks.append((kind, val, start))
        i = m.end()
    toks.append(("end", "", len(text)))
    return toks


class _Parser:
    """Recursive-descent parser producing an AST with source offsets."""

    def __init__(self, text):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, value=None, kind=None):
        tok = self.toks[self.i]
        if (value is not None and tok[1] != value) or (kind is not None and tok[0] != kind):
            want = repr(value) if value else kind
            got = "end of input" if tok[0] == "end" else repr(tok[1])
            raise CompositionSyntaxError(f"expected {want}, got {got}", _byte_offset(self.text, tok[2]))
        self.i += 1
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise CompositionSyntaxError(f"unexpected {tok[1]!r}", _byte_offset(self.text, tok[2]))
        return node

    def expr(self):
        terms = [self.term()]
        while self.peek()[1] == ">":
            self.take(">")
            terms.append(self.term())
        return terms[0] if len(terms) == 1 else ("serial", terms)

    def term(self):
        kind, val, pos = self.peek()
        if val == "[":
            self.take("[")
            items = [self.expr()]
            while self.peek()[1] == ",":
                self.take(",")
                items.append(self.expr())
            self.take("]")
            return ("parallel", items)
        if val == "(":
            self.take("(")
            inner = self.expr()
            self.take(")")
            return ("group", inner)
        if kind == "name":
            self.take(kind="name")
            args = {}
            if self.peek()[1] == "(":
                args = self.args()
            return ("leaf", val, args, pos)
        got = "end of input" if kind == "end" else repr(val)
        raise CompositionSyntaxError(f"expected an operator, '[' or '(', got {got}", _byte_offset(self.text, pos))

    def args(self):
        self.take("(")
        args = {}
        if self.peek()[1] == ")":
            self.take(")")
            return args
        while True:
            _, key, kpos = self.take(kind="name")
            self.take("=")
            args[key] = (self.value(), kpos)
            if self.peek()[1] == ",":
                self.take(",")
                continue
            self.take(")")
            return args

    def value(self):
        kind, val, pos = self.peek()
        if kind == "name":
            self.take(kind="name")
            return val
        if kind != "num":
            raise CompositionSyntaxError("expected a value", _byte_offset(self.text, pos))
        self.take(kind="num")
        if self.peek()[1] == "/":
            self.take("/")
            _, den, dpos = self.take(kind="num")
            if float(den) == 0.0:
                raise CompositionSyntaxError("division by zero", _byte_offset(self.text, dpos))
            return float(Fraction(val) / Fraction(den))
        return int(val) if re.fullmatch(r"[-+]?\d+", val) else float(val)


def _build(ast, text):
    tag = ast[0]
    if tag == "group":
        return _build(ast[1], text)
    if tag == "serial":
        return Serial(tuple(_build(t, text) for t in ast[1]))
    if tag == "parallel":
        return Parallel(tuple(_build(t, text) for t in ast[1]))
    _, name, args, pos = ast
    if name in CATALOG:
        try:
            return Leaf(make_augmentation(name, **{k: v for k, (v, _) in args.items()}))
        except (ValueError, TypeError) as exc:
            raise CompositionSyntaxError(f"bad argument for {name!r}: {exc}", _byte_offset(text, pos)) from None
    if name in PRESETS:
        if args:
            raise CompositionSyntaxError(f"preset {name!r} takes no arguments", _byte_offset(text, pos))
        return preset(name)
    raise CompositionSyntaxError(f"unknown augmentation {name!r}", _byte_offset(text, pos))


def parse_composition(text: str) -> CompositionNode:
    """Parse a composition expression; errors carry a byte offset."""
    return _build(_Parser(text).parse(), text)


def _fmt_value(v):
    if isinstance(v, str):
        return v
    if isinstance(v, float) and v.is_integer() and abs(v) < 1e15:
        return f"{v:.1f}"
    return repr(v)


def format_composition(node: CompositionNode) -> str:
    if isinstance(node, Leaf):
        ov = node.aug.overrides
        if not ov:
            return node.aug.name
        return f"{node.aug.name}({', '.join(f'{k}={_fmt_value(v)}' for k, v in ov.items())})"
    if isinstance(node, Parallel):
        return "[" + ", ".join(format_composition(c) for c in node.children) + "]"
    parts = []
    for c in node.children:
        s = format_composition(c)
        parts.append(f"({s})" if isinstance(c, Serial) else s)
    return " > ".join(parts)
