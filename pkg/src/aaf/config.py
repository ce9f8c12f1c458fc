"""Line-oriented text format for :class:`~aaf.pipeline.PipelineConfig`.

Example::

    # FRW-style reweighting
    [pipeline]
    order = align_then_attend
    shots_aggregation = mean_features

    [alignment]
    query = identity
    support = identity

    [attention]
    query = support_pool_reweight(max)
    support = none

    [fusion]
    components = []
    pool = none

Outside any section, keys may be written dotted (``attention.query = ...``);
``fusion = [...]`` is shorthand for ``fusion.components``. Omitted keys keep
their defaults, which together form the all-identity pipeline.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .operators import (
    AFFINITY_KINDS,
    ATTENTION_KINDS,
    FUSION_OPS,
    POOL_MODES,
    AffinityKind,
    AttentionKind,
    FusionComponent,
    FusionKind,
)
from .pipeline import AGGREGATIONS, ORDERS, PipelineConfig


class ConfigError(ValueError):
    """A rejected configuration, located at ``line``/``column`` (1-based)."""

    def __init__(self, line: int, column: int, message: str, expected: Optional[Sequence[str]] = None):
        self.line = line
        self.column = column
        self.message = message
        self.expected = list(expected) if expected else []
        text = f"line {line}, column {column}: {message}"
        if self.expected:
            text += f" (expected one of: {', '.join(self.expected)})"
        super().__init__(text)


SECTIONS = ("pipeline", "alignment", "attention", "fusion")
KEYS = {
    "pipeline": ("order", "shots_aggregation"),
    "alignment": ("query", "support"),
    "attention": ("query", "support"),
    "fusion": ("components", "pool"),
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)"
    r"|(?P<punct>[=\[\](),]))"
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    col: int


def _lex(body: str, lineno: int) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(body):
        if body[pos].isspace():
            pos += 1
            continue
        mt = _TOKEN.match(body, pos)
        if mt is None or mt.end() == pos:
            raise ConfigError(lineno, pos + 1, f"unexpected character {body[pos]!r}")
        kind = mt.lastgroup
        toks.append(_Tok(kind, mt.group(kind), mt.start(kind) + 1))
        pos = mt.end()
    return toks


class _Cursor:
    def __init__(self, toks: list[_Tok], lineno: int, line_len: int):
        self.toks = toks
        self.i = 0
        self.lineno = lineno
        self.end_col = line_len + 1

    def peek(self) -> Optional[_Tok]:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def col(self) -> int:
        t = self.peek()
        return t.col if t else self.end_col

    def next(self, what: str) -> _Tok:
        t = self.peek()
        if t is None:
            raise ConfigError(self.lineno, self.end_col, f"unexpected end of line, expected {what}")
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.next(repr(text))
        if t.text != text:
            raise ConfigError(self.lineno, t.col, f"expected {text!r}, found {t.text!r}")
        return t

    def ident(self, what: str, expected: Sequence[str] = ()) -> _Tok:
        t = self.next(what)
        if t.kind != "ident":
            raise ConfigError(self.lineno, t.col, f"expected {what}, found {t.text!r}", expected)
        return t

    def done(self) -> None:
        t = self.peek()
        if t is not None:
            raise ConfigError(self.lineno, t.col, f"unexpected trailing token {t.text!r}")


def _choice(cur: _Cursor, what: str, allowed: Sequence[str]) -> str:
    t = cur.ident(what, allowed)
    if t.text not in allowed:
        raise ConfigError(cur.lineno, t.col, f"unknown {what} {t.text!r}", allowed)
    return t.text


def _operator(cur: _Cursor, allowed: Sequence[str]) -> tuple[str, Optional[_Tok], int]:
    name = _choice(cur, "operator", allowed)
    col = cur.toks[cur.i - 1].col
    arg = None
    if cur.peek() is not None and cur.peek().text == "(":
        cur.next("(")
        arg = cur.next("argument")
        if arg.kind == "punct":
            raise ConfigError(cur.lineno, arg.col, f"expected an argument, found {arg.text!r}")
        cur.expect(")")
    return name, arg, col


def _affinity(cur: _Cursor) -> AffinityKind:
    name, arg, col = _operator(cur, AFFINITY_KINDS)
    if name != "softmax_dot_product":
        if arg is not None:
            raise ConfigError(cur.lineno, arg.col, f"{name} takes no argument")
        return AffinityKind(name)
    if arg is None or (arg.kind == "ident" and arg.text == "inv_sqrt_d"):
        return AffinityKind(name, None if arg is not None else 1.0)
    if arg.kind != "num":
        raise ConfigError(cur.lineno, arg.col, f"scale must be a number or inv_sqrt_d, found {arg.text!r}",
                          ["<number>", "inv_sqrt_d"])
    value = float(arg.text)
    if not math.isfinite(value) or value <= 0:
        raise ConfigError(cur.lineno, arg.col, f"scale must be a positive finite number, got {arg.text}")
    return AffinityKind(name, value)


def _attention(cur: _Cursor) -> AttentionKind:
    name, arg, col = _operator(cur, ATTENTION_KINDS)
    if name == "support_pool_reweight":
        if arg is None:
            raise ConfigError(cur.lineno, col, "missing required argument: pooling mode", POOL_MODES)
        if arg.text not in POOL_MODES:
            raise ConfigError(cur.lineno, arg.col, f"unknown pooling mode {arg.text!r}", POOL_MODES)
        return AttentionKind(name, arg.text)
    if arg is not None:
        raise ConfigError(cur.lineno, arg.col, f"{name} takes no argument")
    return AttentionKind(name)


def _components(cur: _Cursor) -> tuple:
    cur.expect("[")
    comps = []
    if cur.peek() is not None and cur.peek().text == "]":
        cur.next("]")
        return ()
    while True:
        t = cur.ident("fusion operator", FUSION_OPS + ("learnable",))
        if t.text == "learnable":
            cur.expect("(")
            inner = cur.ident("fusion operator", FUSION_OPS)
            if inner.text not in FUSION_OPS:
                raise ConfigError(cur.lineno, inner.col, f"unknown operator {inner.text!r}", FUSION_OPS)
            cur.expect(")")
            comps.append(FusionComponent(inner.text, True))
        elif t.text in FUSION_OPS:
            comps.append(FusionComponent(t.text))
        else:
            raise ConfigError(cur.lineno, t.col, f"unknown operator {t.text!r}", FUSION_OPS)
        sep = cur.next("',' or ']'")
        if sep.text == "]":
            return tuple(comps)
        if sep.text != ",":
            raise ConfigError(cur.lineno, sep.col, f"expected ',' or ']', found {sep.text!r}")


def _value(section: str, key: str, cur: _Cursor):
    if section == "pipeline":
        allowed = ORDERS if key == "order" else AGGREGATIONS
        return _choice(cur, key, allowed)
    if section == "alignment":
        return _affinity(cur)
    if section == "attention":
        return _attention(cur)
    if key == "components":
        return _components(cur)
    return _choice(cur, "pooling mode", ("none",) + POOL_MODES)


def parse(text: str) -> PipelineConfig:
    """Parse config text; raises :class:`ConfigError` on any malformed input."""
    values: dict[tuple[str, str], object] = {}
    lines: dict[str, int] = {}
    seen_sections: dict[str, int] = {}
    section: Optional[str] = None
    section_line = 0
    if not isinstance(text, str):
        raise ConfigError(1, 1, "configuration must be text")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].rstrip()
        if not body.strip():
            continue
        toks = _lex(body, lineno)
        cur = _Cursor(toks, lineno, len(body))
        first = cur.peek()
        if first.text == "[":
            cur.next("[")
            name = _choice(cur, "section", SECTIONS)
            cur.expect("]")
            cur.done()
            if name in seen_sections:
                raise ConfigError(lineno, first.col,
                                  f"duplicate section [{name}] (first declared on line {seen_sections[name]})")
            if section == "fusion" and ("fusion", "components") not in values:
                raise ConfigError(section_line, 1, "missing required key 'components' in [fusion]")
            seen_sections[name] = lineno
            section, section_line = name, lineno
            continue
        key_tok = cur.ident("key")
        parts = key_tok.text.split(".")
        if section is None:
            if parts == ["fusion"]:
                parts = ["fusion", "components"]
            if len(parts) != 2:
                raise ConfigError(lineno, key_tok.col,
                                  f"unknown key {key_tok.text!r}; outside a section use 'section.key'",
                                  [f"{s}.{k}" for s in SECTIONS for k in KEYS[s]])
            sec, key = parts
            if sec not in SECTIONS:
                raise ConfigError(lineno, key_tok.col, f"unknown section {sec!r}", SECTIONS)
        else:
            if len(parts) != 1:
                raise ConfigError(lineno, key_tok.col,
                                  f"dotted key {key_tok.text!r} not allowed inside [{section}]", KEYS[section])
            sec, key = section, parts[0]
        if key not in KEYS[sec]:
            raise ConfigError(lineno, key_tok.col, f"unknown key {key!r} in [{sec}]", KEYS[sec])
        if (sec, key) in values:
            raise ConfigError(lineno, key_tok.col,
                              f"duplicate key {sec}.{key} (first set on line {lines[f'{sec}.{key}']})")
        cur.expect("=")
        values[(sec, key)] = _value(sec, key, cur)
        cur.done()
        lines[f"{sec}.{key}"] = lineno

    if section == "fusion" and ("fusion", "components") not in values:
        raise ConfigError(section_line, 1, "missing required key 'components' in [fusion]")
    if not values:
        raise ConfigError(1, 1, "empty configuration: no keys declared")

    fusion = FusionKind(values.get(("fusion", "components"), ()), values.get(("fusion", "pool"), "none"))
    defaults = PipelineConfig()
    return PipelineConfig(
        order=values.get(("pipeline", "order"), defaults.order),
        shots_aggregation=values.get(("pipeline", "shots_aggregation"), defaults.shots_aggregation),
        align_query=values.get(("alignment", "query"), defaults.align_query),
        align_support=values.get(("alignment", "support"), defaults.align_support),
        attend_query=values.get(("attention", "query"), defaults.attend_query),
        attend_support=values.get(("attention", "support"), defaults.attend_support),
        fusion=fusion,
        lines=lines,
    )


def _fmt_affinity(a: AffinityKind) -> str:
    if a.kind != "softmax_dot_product":
        return a.kind
    return f"{a.kind}(inv_sqrt_d)" if a.scale is None else f"{a.kind}({a.scale!r})"


def _fmt_attention(a: AttentionKind) -> str:
    return f"{a.kind}({a.pool})" if a.pool else a.kind


def _fmt_component(c: FusionComponent) -> str:
    return f"learnable({c.op})" if c.learnable else c.op


def print_config(config: PipelineConfig) -> str:
    """Canonical text for ``config``; sections and keys always in the same order."""
    comps = ", ".join(_fmt_component(c) for c in config.fusion.components)
    return "\n".join([
        "[pipeline]",
        f"order = {config.order}",
        f"shots_aggregation = {config.shots_aggregation}",
        "",
        "[alignment]",
        f"query = {_fmt_affinity(config.align_query)}",
        f"support = {_fmt_affinity(config.align_support)}",
        "",
        "[attention]",
        f"query = {_fmt_attention(config.attend_query)}",
        f"support = {_fmt_attention(config.attend_support)}",
        "",
        "[fusion]",
        f"components = [{comps}]",
        f"pool = {config.fusion.pool}",
        "",
    ])


def parse_extent(text: str) -> tuple[int, int]:
    """``"8x8x64"`` -> ``(64, 64)`` (positions, channels); ``"64x32"`` is taken as ``(m, d)``."""
    try:
        dims = [int(x) for x in text.lower().split("x")]
    except ValueError:
        raise ValueError(f"bad extent {text!r}; expected HxWxD or MxD") from None
    if len(dims) == 3:
        return dims[0] * dims[1], dims[2]
    if len(dims) == 2:
        return dims[0], dims[1]
    raise ValueError(f"bad extent {text!r}; expected HxWxD or MxD")


def check_shapes(config: PipelineConfig, query_extent: tuple[int, int],
                 support_extent: tuple[int, int]) -> None:
    """Reject configs that cannot run on maps of the given ``(positions, channels)`` extents.

    Accepting is exact: a config passes iff :func:`aaf_forward` runs on such maps.
    """
    m, d = query_extent
    n, d2 = support_extent
    where = config.lines
    if d != d2:
        raise ConfigError(where.get("alignment.support", 0) or 1, 1,
                          f"query has {d} channels but support has {d2}")
    if not config.align_query.is_identity and m != n:
        raise ConfigError(where.get("alignment.query", 0) or 1, 1,
                          f"query alignment re-expresses the query on the support grid ({n} positions); "
                          f"detection needs the query's {m} positions")
    if config.fusion.arity and m != n and config.align_support.is_identity and config.fusion.pool == "none":
        raise ConfigError(where.get("fusion.components", 0) or 1, 1,
                          f"fusion needs equal spatial extents, got query {m} and support {n}; "
                          "add support alignment or declare fusion pooling")

