"""Analytical parameter and MAC accounting.

Everything here is closed-form arithmetic over the genotype and plan; no
tensors are allocated and nothing from the block/network implementations
is imported.  The trainer-side networks are counted independently by
walking their real parameter sets, and the two routes must agree
exactly, which is what makes this module a usable oracle.

MACs follow the usual convention: one multiply-accumulate per
kernel-element application.  Norms, activations, and pooling count zero
MACs unless ``count_norm_macs`` is set (then a norm costs one MAC per
element).  MAC totals are per sample and exclude the auxiliary head
unless ``include_aux`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .genotype import Genotype, NetworkPlan, OpKind

# the stem widens 3 input channels to STEM_MULTIPLIER * c_init
STEM_MULTIPLIER = 3

AUX_CHANNELS_1 = 128
AUX_CHANNELS_2 = 768


def eq1_weights(C: int, K: int, F: float) -> int:
    """Conv weights of the inverted-bottleneck block: 2FC^2 + K^2 C."""
    _check_ratio(C, F)
    return round(2 * F * C * C) + K * K * C


def eq2_weights(C: int, K: int, F: float) -> int:
    """Conv weights of the pseudo-inverted block with grouped reduce:
    (F+1)C^2 + 2K^2 C."""
    _check_ratio(C, F)
    return round((F + 1) * C * C) + 2 * K * K * C


def coefficient_ratio(F: float) -> float:
    """Ratio of the two blocks' quadratic-term coefficients, (F+1)/(2F)."""
    if F <= 0:
        raise ValueError("F must be positive")
    return (F + 1) / (2 * F)


def _check_ratio(C: int, F: float) -> None:
    fc = F * C
    if abs(fc - round(fc)) > 1e-9:
        raise ValueError(f"F*C must be integral, got F={F}, C={C}")


@dataclass(frozen=True)
class CostOptions:
    norm_affine: bool = True
    pib_f: float = 2.0
    convnext_f: float = 4.0
    pib_grouped_reduce: bool = True
    include_aux: bool = False
    count_norm_macs: bool = False
    classifier_bias: bool = True


@dataclass
class CostReport:
    per_layer: list  # (layer index, cell type, params, macs)
    stem: tuple  # (params, macs)
    classifier: tuple
    aux: Optional[tuple]
    input_hw: int
    includes_aux: bool
    params_total: int = field(init=False)
    macs_total: int = field(init=False)

    def __post_init__(self):
        p = self.stem[0] + self.classifier[0] + sum(r[2] for r in self.per_layer)
        m = self.stem[1] + self.classifier[1] + sum(r[3] for r in self.per_layer)
        if self.aux is not None:
            p += self.aux[0]
            m += self.aux[1]
        self.params_total = p
        self.macs_total = m

    @property
    def params_m(self) -> float:
        return self.params_total / 1e6

    @property
    def gmac(self) -> float:
        return self.macs_total / 1e9

    def itemized(self) -> dict:
        out = {
            "stem": {"params": self.stem[0], "macs": self.stem[1]},
            "cells": [
                {"layer": i, "cell_type": t, "params": p, "macs": m}
                for i, t, p, m in self.per_layer
            ],
            "classifier": {"params": self.classifier[0], "macs": self.classifier[1]},
            "totals": {
                "params": self.params_total,
                "params_m": self.params_m,
                "macs": self.macs_total,
                "gmac": self.gmac,
            },
            "input_hw": self.input_hw,
            "includes_aux": self.includes_aux,
        }
        if self.aux is not None:
            out["aux"] = {"params": self.aux[0], "macs": self.aux[1]}
        return out


def _norm_cost(C: int, spatial2: int, opt: CostOptions):
    p = 2 * C if opt.norm_affine else 0
    m = C * spatial2 if opt.count_norm_macs else 0
    return p, m


def _op_cost(kind: OpKind, C: int, stride: int, s_out: int, opt: CostOptions):
    """Params and MACs of one edge op whose output is s_out x s_out."""
    s2 = s_out * s_out
    np_, nm = _norm_cost(C, s2, opt)
    if kind is OpKind.NONE:
        return 0, 0
    if kind is OpKind.SKIP_CONNECT:
        if stride == 1:
            return 0, 0
        conv = C * C  # two 1x1 convs to C/2 each
        return conv + np_, conv * s2 + nm
    if kind in (OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3):
        return np_, nm
    if kind in (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5):
        K = 3 if kind is OpKind.SEP_CONV_3X3 else 5
        conv = 2 * (K * K * C + C * C)
        return conv + 2 * np_, conv * s2 + 2 * nm
    if kind in (OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5):
        K = 3 if kind is OpKind.DIL_CONV_3X3 else 5
        conv = K * K * C + C * C
        return conv + np_, conv * s2 + nm
    if kind is OpKind.CONV_7X1_1X7:
        conv = 14 * C * C
        s_in = s_out * stride
        macs = 7 * C * C * s_out * s_in + 7 * C * C * s2
        return conv + np_, macs + nm
    if kind in (OpKind.PIB_CONV_3X3, OpKind.PIB_CONV_5X5, OpKind.PIB_CONV_7X7):
        K = {OpKind.PIB_CONV_3X3: 3, OpKind.PIB_CONV_5X5: 5, OpKind.PIB_CONV_7X7: 7}[kind]
        F = opt.pib_f
        _check_ratio(C, F)
        expand = round(F * C * C)
        reduce = C * C if opt.pib_grouped_reduce else round(F * C * C)
        conv = 2 * K * K * C + expand + reduce
        return conv + 2 * np_, conv * s2 + 2 * nm
    if kind is OpKind.CONVNEXT_CONV_7X7:
        F = opt.convnext_f
        _check_ratio(C, F)
        conv = 7 * 7 * C + 2 * round(F * C * C)
        return conv + np_, conv * s2 + nm
    raise ValueError(f"no cost rule for {kind}")


def analyze_costs(genotype: Genotype, plan: NetworkPlan, opt: CostOptions = CostOptions()) -> CostReport:
    """Symbolically walk the cell stack and classifier, mirroring the
    evaluation network layer for layer."""
    s = plan.input_hw
    c_stem = STEM_MULTIPLIER * plan.c_init
    stem_np, stem_nm = _norm_cost(c_stem, s * s, opt)
    stem = (3 * c_stem * 9 + stem_np, 3 * c_stem * 9 * s * s + stem_nm)

    c_pp = c_p = c_stem
    s_pp = s_p = s
    reduction_prev = False
    per_layer = []
    aux_cost = None
    for i in range(plan.layers):
        c = plan.channels[i]
        red = i in plan.reduction_indices
        spec = genotype.reduce if red else genotype.normal
        s_out = s_p // 2 if red else s_p
        params = 0
        macs = 0
        # input adapters: s0 through a halving adapter if the previous
        # cell reduced, else a 1x1 projection; s1 always a 1x1 projection
        if reduction_prev:
            half = s_pp // 2
            np_, nm = _norm_cost(c, half * half, opt)
            params += c_pp * c + np_
            macs += c_pp * c * half * half + nm
        else:
            np_, nm = _norm_cost(c, s_p * s_p, opt)
            params += c_pp * c + np_
            macs += c_pp * c * s_p * s_p + nm
        np_, nm = _norm_cost(c, s_p * s_p, opt)
        params += c_p * c + np_
        macs += c_p * c * s_p * s_p + nm
        for pair in spec.node_edges:
            for e in pair:
                stride = 2 if (red and e.source < 2) else 1
                p_, m_ = _op_cost(e.op, c, stride, s_out, opt)
                params += p_
                macs += m_
        per_layer.append((i, "reduce" if red else "normal", params, macs))
        out_c = len(spec.concat) * c
        c_pp, c_p = c_p, out_c
        s_pp, s_p = s_p, s_out
        reduction_prev = red
        if opt.include_aux and plan.aux_index == i:
            aux_cost = _aux_cost(out_c, plan.num_classes, s_out, opt)

    cls_params = c_p * plan.num_classes + (plan.num_classes if opt.classifier_bias else 0)
    cls_macs = c_p * plan.num_classes
    return CostReport(
        per_layer=per_layer,
        stem=stem,
        classifier=(cls_params, cls_macs),
        aux=aux_cost,
        input_hw=plan.input_hw,
        includes_aux=aux_cost is not None,
    )


def _aux_cost(cin: int, num_classes: int, hw: int, opt: CostOptions):
    pooled = (hw - 5) // 3 + 1
    np1, nm1 = _norm_cost(AUX_CHANNELS_1, pooled * pooled, opt)
    hw2 = pooled - 1
    np2, nm2 = _norm_cost(AUX_CHANNELS_2, hw2 * hw2, opt)
    flat = AUX_CHANNELS_2 * hw2 * hw2
    params = (
        cin * AUX_CHANNELS_1 + np1
        + AUX_CHANNELS_1 * AUX_CHANNELS_2 * 4 + np2
        + flat * num_classes + num_classes
    )
    macs = (
        cin * AUX_CHANNELS_1 * pooled * pooled + nm1
        + AUX_CHANNELS_1 * AUX_CHANNELS_2 * 4 * hw2 * hw2 + nm2
        + flat * num_classes
    )
    return params, macs


def count_params(genotype: Genotype, plan: NetworkPlan, opt: CostOptions = CostOptions()) -> CostReport:
    return analyze_costs(genotype, plan, opt)


def count_macs(genotype: Genotype, plan: NetworkPlan, opt: CostOptions = CostOptions()) -> CostReport:
    return analyze_costs(genotype, plan, opt)


def compare_table(named_genotypes, layer_counts, plan_args: dict, opt: CostOptions = CostOptions(),
                  metrics: Optional[dict] = None) -> str:
    """CSV comparison over genotypes x layer counts, descending layers
    (the layout of the published comparison tables).

    plan_args supplies c_init, num_classes, input_hw.  metrics, when
    given, maps (genotype_name, layers) to accuracy and adds a column.
    """
    from .genotype import plan_network

    header = "genotype,layers,params_m,gmac"
    if metrics is not None:
        header += ",accuracy"
    lines = [header]
    for name, geno in named_genotypes:
        for layers in sorted(layer_counts, reverse=True):
            plan = plan_network(layers, plan_args.get("c_init", 36),
                                plan_args.get("num_classes", 10),
                                plan_args.get("input_hw", 32), aux=False)
            rep = analyze_costs(geno, plan, opt)
            row = f"{name},{layers},{rep.params_m:.6f},{rep.gmac:.6f}"
            if metrics is not None:
                acc = metrics.get((name, layers))
                row += f",{acc:.4f}" if acc is not None else ","
            lines.append(row)
    return "\n".join(lines) + "\n"
