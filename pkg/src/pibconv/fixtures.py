"""Reference genotypes used by tests, the cost tables, and the CLI.

DARTS_V2 is the published second-order cell pair.  PIB_REPRESENTATIVE is
a hand-built stand-in for a searched cell dominated by pib_conv_5x5 (the
op the search favors); it is labeled representative, not a reproduction
of any published search result.
"""

from __future__ import annotations

from .genotype import CellSpec, Edge, Genotype, OpKind, DEFAULT_CONCAT


def _cell(*pairs) -> CellSpec:
    nodes = tuple(
        tuple(Edge(op, src) for op, src in pair)
        for pair in pairs
    )
    return CellSpec(nodes, DEFAULT_CONCAT)


DARTS_V2 = Genotype(
    normal=_cell(
        ((OpKind.SEP_CONV_3X3, 0), (OpKind.SEP_CONV_3X3, 1)),
        ((OpKind.SEP_CONV_3X3, 0), (OpKind.SEP_CONV_3X3, 1)),
        ((OpKind.SEP_CONV_3X3, 1), (OpKind.SKIP_CONNECT, 0)),
        ((OpKind.SKIP_CONNECT, 0), (OpKind.DIL_CONV_3X3, 2)),
    ),
    reduce=_cell(
        ((OpKind.MAX_POOL_3X3, 0), (OpKind.MAX_POOL_3X3, 1)),
        ((OpKind.SKIP_CONNECT, 2), (OpKind.MAX_POOL_3X3, 1)),
        ((OpKind.MAX_POOL_3X3, 0), (OpKind.SKIP_CONNECT, 2)),
        ((OpKind.SKIP_CONNECT, 2), (OpKind.MAX_POOL_3X3, 1)),
    ),
)

PIB_REPRESENTATIVE = Genotype(
    normal=_cell(
        ((OpKind.PIB_CONV_5X5, 0), (OpKind.PIB_CONV_5X5, 1)),
        ((OpKind.PIB_CONV_5X5, 0), (OpKind.PIB_CONV_5X5, 1)),
        ((OpKind.PIB_CONV_7X7, 0), (OpKind.PIB_CONV_5X5, 1)),
        ((OpKind.PIB_CONV_5X5, 0), (OpKind.DIL_CONV_5X5, 2)),
    ),
    reduce=_cell(
        ((OpKind.MAX_POOL_3X3, 0), (OpKind.PIB_CONV_5X5, 1)),
        ((OpKind.PIB_CONV_5X5, 2), (OpKind.MAX_POOL_3X3, 1)),
        ((OpKind.MAX_POOL_3X3, 0), (OpKind.PIB_CONV_3X3, 2)),
        ((OpKind.SKIP_CONNECT, 2), (OpKind.PIB_CONV_5X5, 1)),
    ),
)


def all_op_genotype(op: OpKind) -> Genotype:
    """Both cells use ``op`` on every edge, sources 0 and 1."""
    cell = _cell(*[((op, 0), (op, 1)) for _ in range(4)])
    return Genotype(normal=cell, reduce=cell)


FIXTURES = {
    "darts_v2": DARTS_V2,
    "pib_representative": PIB_REPRESENTATIVE,
    "all_skip": all_op_genotype(OpKind.SKIP_CONNECT),
}
