"""Architecture vocabulary: operation kinds, cells, genotypes, and the
text format they travel in.

A genotype names, for each of the two cell types, four derived nodes
with two incoming edges each, plus the set of node outputs concatenated
into the cell output.  The text form is diff-friendly and hand-editable:

    normal: (skip_connect,0)(skip_connect,1) | ... three more node groups
    concat: 2 3 4 5
    reduce: ...
    concat: 2 3 4 5

Sections may also be separated by semicolons; whitespace and newlines
are otherwise insignificant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional


class OpKind(enum.Enum):
    NONE = "none"
    SKIP_CONNECT = "skip_connect"
    PIB_CONV_3X3 = "pib_conv_3x3"
    PIB_CONV_5X5 = "pib_conv_5x5"
    PIB_CONV_7X7 = "pib_conv_7x7"
    DIL_CONV_3X3 = "dil_conv_3x3"
    DIL_CONV_5X5 = "dil_conv_5x5"
    CONV_7X1_1X7 = "conv_7x1_1x7"
    MAX_POOL_3X3 = "max_pool_3x3"
    AVG_POOL_3X3 = "avg_pool_3x3"
    # retained for baseline / ablation networks, never searched by default
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    CONVNEXT_CONV_7X7 = "convnext_conv_7x7"


# Default search set, in canonical order; tie-breaks during derivation
# use the position in this tuple.
SEARCH_OPS = (
    OpKind.NONE,
    OpKind.SKIP_CONNECT,
    OpKind.PIB_CONV_3X3,
    OpKind.PIB_CONV_5X5,
    OpKind.PIB_CONV_7X7,
    OpKind.DIL_CONV_3X3,
    OpKind.DIL_CONV_5X5,
    OpKind.CONV_7X1_1X7,
    OpKind.MAX_POOL_3X3,
    OpKind.AVG_POOL_3X3,
)

LEGACY_OPS = (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5, OpKind.CONVNEXT_CONV_7X7)

# Accepted alternate spellings, normalized on output.
_ALIASES = {
    "dialated_conv_3x3": OpKind.DIL_CONV_3X3,
    "dialated_conv_5x5": OpKind.DIL_CONV_5X5,
}

_BY_NAME = {k.value: k for k in OpKind}

NUM_NODES = 4
EDGES_PER_NODE = 2
DEFAULT_CONCAT = frozenset({2, 3, 4, 5})
# candidate incoming edges over all derived nodes: 2+3+4+5
NUM_CANDIDATE_EDGES = sum(2 + i for i in range(NUM_NODES))


class GenotypeError(ValueError):
    """Raised for malformed genotype text; parse errors carry a 1-based
    position."""

    def __init__(self, message: str, line: Optional[int] = None, col: Optional[int] = None):
        if line is not None:
            message = f"line {line}, col {col}: {message}"
        super().__init__(message)
        self.line = line
        self.col = col


def resolve_op(name: str) -> OpKind:
    """Look up an op by canonical name or accepted alias."""
    op = _BY_NAME.get(name) or _ALIASES.get(name)
    if op is None:
        raise GenotypeError(f"unknown operation '{name}'")
    return op


@dataclass(frozen=True)
class Edge:
    op: OpKind
    source: int


@dataclass(frozen=True)
class CellSpec:
    node_edges: tuple  # NUM_NODES entries, each a (Edge, Edge) pair
    concat: frozenset = DEFAULT_CONCAT


@dataclass(frozen=True)
class Genotype:
    normal: CellSpec
    reduce: CellSpec


@dataclass(frozen=True)
class NetworkPlan:
    layers: int
    c_init: int
    num_classes: int
    input_hw: int
    reduction_indices: frozenset
    aux_index: Optional[int]
    channels: tuple  # per-layer cell base channel count, post doubling


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_KEYWORDS = ("normal", "reduce", "concat")


class _Scanner:
    """Hands out tokens with 1-based line/col positions; newlines and
    semicolons are plain whitespace, so layout is free-form."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _linecol(self, at: int):
        line = self.text.count("\n", 0, at) + 1
        last_nl = self.text.rfind("\n", 0, at)
        return line, at - last_nl

    def error(self, message: str, at: Optional[int] = None):
        line, col = self._linecol(self.pos if at is None else at)
        raise GenotypeError(message, line, col)

    def skip_ws(self):
        while self.pos < len(self.text) and (self.text[self.pos].isspace() or self.text[self.pos] == ";"):
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            got = self.text[self.pos] if self.pos < len(self.text) else "end of input"
            self.error(f"expected '{ch}', got '{got}'")
        self.pos += 1

    def word(self) -> tuple:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and (self.text[self.pos].isalnum() or self.text[self.pos] == "_"):
            self.pos += 1
        if self.pos == start:
            got = self.text[self.pos] if self.pos < len(self.text) else "end of input"
            self.error(f"expected a name or number, got '{got}'")
        return self.text[start : self.pos], start

    def at_keyword(self) -> bool:
        self.skip_ws()
        for kw in _KEYWORDS:
            if self.text.startswith(kw, self.pos):
                after = self.pos + len(kw)
                rest = self.text[after:].lstrip()
                if rest.startswith(":"):
                    return True
        return False

    def done(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)


def _parse_edge(sc: _Scanner, node_index: int) -> Edge:
    sc.expect("(")
    name, at = sc.word()
    op = _BY_NAME.get(name.lower()) or _ALIASES.get(name.lower())
    if op is None:
        sc.error(f"unknown operation '{name}'", at)
    sc.expect(",")
    num, at = sc.word()
    if not num.isdigit():
        sc.error(f"edge source must be an integer, got '{num}'", at)
    source = int(num)
    if source >= node_index:
        sc.error(f"edge source {source} must precede node {node_index}", at)
    sc.expect(")")
    return Edge(op, source)


def _parse_cell(sc: _Scanner, label: str) -> tuple:
    nodes = []
    while True:
        node_index = 2 + len(nodes)
        edges = []
        while sc.peek() == "(":
            edges.append(_parse_edge(sc, node_index))
        if len(edges) != EDGES_PER_NODE:
            sc.error(f"{label} cell node {node_index} has {len(edges)} edges, expected {EDGES_PER_NODE}")
        nodes.append(tuple(edges))
        if sc.peek() == "|":
            sc.expect("|")
            continue
        break
    if len(nodes) != NUM_NODES:
        sc.error(f"{label} cell has {len(nodes)} nodes, expected {NUM_NODES}")
    return tuple(nodes)


def _parse_concat(sc: _Scanner, label: str) -> frozenset:
    indices = []
    while not sc.done() and not sc.at_keyword() and sc.peek() != "":
        num, at = sc.word()
        if not num.isdigit():
            sc.error(f"concat index must be an integer, got '{num}'", at)
        idx = int(num)
        if not (2 <= idx <= 1 + NUM_NODES):
            sc.error(f"concat index {idx} is not a derived node (2..{1 + NUM_NODES})", at)
        indices.append(idx)
    if not indices:
        sc.error(f"empty concat list for {label} cell")
    return frozenset(indices)


def _parse_section_header(sc: _Scanner, expected: str):
    name, at = sc.word()
    if name.lower() != expected:
        sc.error(f"expected section '{expected}:', got '{name}'", at)
    sc.expect(":")


def parse_genotype(text: str) -> Genotype:
    """Parse the text form; raises GenotypeError with position on any
    syntax or vocabulary problem."""
    sc = _Scanner(text)
    _parse_section_header(sc, "normal")
    normal_nodes = _parse_cell(sc, "normal")
    _parse_section_header(sc, "concat")
    normal_concat = _parse_concat(sc, "normal")
    _parse_section_header(sc, "reduce")
    reduce_nodes = _parse_cell(sc, "reduce")
    _parse_section_header(sc, "concat")
    reduce_concat = _parse_concat(sc, "reduce")
    if not sc.done():
        sc.error("unexpected trailing text")
    g = Genotype(CellSpec(normal_nodes, normal_concat), CellSpec(reduce_nodes, reduce_concat))
    problems = validate_genotype(g)
    if problems:
        sc.error("; ".join(problems))
    return g


def serialize_genotype(g: Genotype) -> str:
    """Canonical text form: byte-deterministic, parse(serialize(g)) == g."""

    def cell(label: str, spec: CellSpec) -> str:
        nodes = " | ".join(
            "".join(f"({e.op.value},{e.source})" for e in pair) for pair in spec.node_edges
        )
        concat = " ".join(str(i) for i in sorted(spec.concat))
        return f"{label}: {nodes}\nconcat: {concat}\n"

    return cell("normal", g.normal) + cell("reduce", g.reduce)


def validate_genotype(g: Genotype) -> list:
    """Collect invariant violations (empty list means valid)."""
    problems = []
    for label, spec in (("normal", g.normal), ("reduce", g.reduce)):
        if len(spec.node_edges) != NUM_NODES:
            problems.append(f"{label} cell: {len(spec.node_edges)} nodes, expected {NUM_NODES}")
            continue
        for i, pair in enumerate(spec.node_edges):
            node = 2 + i
            if len(pair) != EDGES_PER_NODE:
                problems.append(f"{label} cell node {node}: {len(pair)} edges, expected {EDGES_PER_NODE}")
                continue
            for e in pair:
                if not isinstance(e.op, OpKind):
                    problems.append(f"{label} cell node {node}: unknown op {e.op!r}")
                if not (0 <= e.source < node):
                    problems.append(f"{label} cell node {node}: source {e.source} must be < {node}")
        for idx in spec.concat:
            if not (2 <= idx <= 1 + NUM_NODES):
                problems.append(f"{label} cell concat: {idx} is not a derived node")
        if not spec.concat:
            problems.append(f"{label} cell concat: empty")
    return problems


def plan_network(layers: int, c_init: int, num_classes: int, input_hw: int, aux: bool) -> NetworkPlan:
    """Lay out the cell stack: reduction cells at 1/3 and 2/3 depth
    (layers >= 3 only), channels doubling at each reduction, optional
    auxiliary classifier after the 2/3-depth cell."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if c_init < 1:
        raise ValueError("c_init must be >= 1")
    if layers >= 3:
        reductions = frozenset({layers // 3, 2 * layers // 3})
    else:
        reductions = frozenset()
    if aux and layers < 3:
        raise ValueError("auxiliary head requires layers >= 3 (no 2/3-depth cell exists)")
    aux_index = 2 * layers // 3 if aux else None
    channels = []
    c = c_init
    for i in range(layers):
        if i in reductions:
            c *= 2
        channels.append(c)
    return NetworkPlan(
        layers=layers,
        c_init=c_init,
        num_classes=num_classes,
        input_hw=input_hw,
        reduction_indices=reductions,
        aux_index=aux_index,
        channels=tuple(channels),
    )
