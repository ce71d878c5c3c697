import pytest

from pibconv.fixtures import FIXTURES, all_op_genotype
from pibconv.genotype import (
    DEFAULT_CONCAT,
    LEGACY_OPS,
    SEARCH_OPS,
    CellSpec,
    Edge,
    Genotype,
    GenotypeError,
    OpKind,
    parse_genotype,
    plan_network,
    resolve_op,
    serialize_genotype,
    validate_genotype,
)


def test_canonical_op_order():
    assert [op.value for op in SEARCH_OPS] == [
        "none", "skip_connect", "pib_conv_3x3", "pib_conv_5x5", "pib_conv_7x7",
        "dil_conv_3x3", "dil_conv_5x5", "conv_7x1_1x7", "max_pool_3x3",
        "avg_pool_3x3",
    ]
    assert [op.value for op in LEGACY_OPS] == [
        "sep_conv_3x3", "sep_conv_5x5", "convnext_conv_7x7",
    ]


def test_alias_resolution():
    assert resolve_op("dialated_conv_3x3") is OpKind.DIL_CONV_3X3
    assert resolve_op("dialated_conv_5x5") is OpKind.DIL_CONV_5X5
    assert resolve_op("dil_conv_3x3") is OpKind.DIL_CONV_3X3
    with pytest.raises(GenotypeError):
        resolve_op("transposed_conv_3x3")


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_fixture_round_trip(name):
    g = FIXTURES[name]
    assert validate_genotype(g) == []
    text = serialize_genotype(g)
    assert parse_genotype(text) == g
    # serialization is canonical: a second round trip is byte-identical
    assert serialize_genotype(parse_genotype(text)) == text


def test_parse_whitespace_and_separators():
    text = serialize_genotype(FIXTURES["darts_v2"])
    squashed = text.replace("\n", ";")
    assert parse_genotype(squashed) == FIXTURES["darts_v2"]
    spaced = text.replace("(", "  (").replace("|", "\n|\n")
    assert parse_genotype(spaced) == FIXTURES["darts_v2"]


def test_parse_legacy_alias_in_file():
    text = serialize_genotype(FIXTURES["darts_v2"]).replace("dil_conv", "dialated_conv")
    assert parse_genotype(text) == FIXTURES["darts_v2"]


@pytest.mark.parametrize("mangle,fragment", [
    (lambda t: t.replace("sep_conv_3x3", "sep_conv_9x9", 1), "sep_conv_9x9"),
    (lambda t: t.replace("(skip_connect,0)", "(skip_connect,9)", 1), "source"),
    (lambda t: t.replace("concat: 2 3 4 5", "concat: 2 3 4 9", 1), "concat"),
    (lambda t: t + "tail", "tail"),
    (lambda t: t.replace("normal:", "normol:", 1), "normal"),
])
def test_parse_errors_report_position(mangle, fragment):
    text = mangle(serialize_genotype(FIXTURES["darts_v2"]))
    with pytest.raises(GenotypeError) as exc:
        parse_genotype(text)
    msg = str(exc.value)
    assert "line" in msg and "col" in msg
    assert fragment.split(":")[0] in msg or fragment in msg


def test_parse_wrong_edge_count():
    text = serialize_genotype(FIXTURES["darts_v2"])
    broken = text.replace("(sep_conv_3x3,0)(sep_conv_3x3,1)",
                          "(sep_conv_3x3,0)", 1)
    with pytest.raises(GenotypeError):
        parse_genotype(broken)


def test_validate_reports_bad_source():
    bad = Genotype(
        normal=CellSpec(node_edges=(
            (Edge(OpKind.SKIP_CONNECT, 0), Edge(OpKind.SKIP_CONNECT, 1)),
            (Edge(OpKind.SKIP_CONNECT, 3), Edge(OpKind.SKIP_CONNECT, 0)),  # 3 >= node idx 3
            (Edge(OpKind.SKIP_CONNECT, 0), Edge(OpKind.SKIP_CONNECT, 1)),
            (Edge(OpKind.SKIP_CONNECT, 0), Edge(OpKind.SKIP_CONNECT, 1)),
        )),
        reduce=FIXTURES["darts_v2"].reduce,
    )
    violations = validate_genotype(bad)
    assert violations and any("source" in v for v in violations)
    assert any("normal" in v for v in violations)


def test_validate_reports_bad_concat():
    bad = Genotype(
        normal=CellSpec(node_edges=FIXTURES["darts_v2"].normal.node_edges,
                        concat=frozenset({1, 2, 3})),
        reduce=FIXTURES["darts_v2"].reduce,
    )
    assert any("concat" in v for v in validate_genotype(bad))


def test_default_concat():
    assert DEFAULT_CONCAT == frozenset({2, 3, 4, 5})


def test_all_op_genotype():
    g = all_op_genotype(OpKind.PIB_CONV_3X3)
    assert validate_genotype(g) == []
    ops = {e.op for pair in g.normal.node_edges for e in pair}
    assert ops == {OpKind.PIB_CONV_3X3}


@pytest.mark.parametrize("layers,expect_red,expect_aux", [
    (1, (), None),
    (2, (), None),
    (3, (1, 2), 2),
    (8, (2, 5), 5),
    (20, (6, 13), 13),
])
def test_plan_reduction_and_aux_positions(layers, expect_red, expect_aux):
    plan = plan_network(layers, 16, 10, 32, aux=expect_aux is not None)
    assert tuple(sorted(plan.reduction_indices)) == expect_red
    assert plan.aux_index == expect_aux


def test_plan_channels_double_at_reductions():
    plan = plan_network(8, 16, 10, 32, aux=False)
    assert plan.channels == (16, 16, 32, 32, 32, 64, 64, 64)


def test_plan_aux_needs_three_layers():
    with pytest.raises(ValueError):
        plan_network(2, 16, 10, 32, aux=True)
