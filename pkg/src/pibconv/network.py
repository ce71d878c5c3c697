"""Evaluation-phase network: a stem, a stack of genotype cells, an
optional auxiliary classifier at 2/3 depth, and a linear head.

Cell wiring follows the two-input convention: each cell consumes the
outputs of its two predecessors, aligned to the cell's channel count by
a 1x1 projection (or a stride-2 adapter when the previous cell reduced).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import blocks
from .blocks import ActConvNorm, AuxiliaryHead, BlockConfig, FactorizedReduce, Linear, Module, Stem
from .costmodel import STEM_MULTIPLIER
from .engine import ops
from .engine.tensor import Tensor
from .genotype import CellSpec, Genotype, NetworkPlan


@dataclass
class ForwardResult:
    logits: Tensor
    aux_logits: Optional[Tensor]
    features: Tensor  # last cell output, pre global pooling


class Cell(Module):
    def __init__(self, spec: CellSpec, c_pp: int, c_p: int, c: int,
                 reduction: bool, reduction_prev: bool, cfg: BlockConfig, rng):
        super().__init__()
        self.reduction = reduction
        if reduction_prev:
            self.pre0 = self.add_child("pre0", FactorizedReduce(c_pp, c, cfg, rng))
        else:
            self.pre0 = self.add_child("pre0", ActConvNorm(c_pp, c, cfg, rng))
        self.pre1 = self.add_child("pre1", ActConvNorm(c_p, c, cfg, rng))
        self.node_sources = []
        self.node_blocks = []
        for ni, pair in enumerate(spec.node_edges):
            sources = []
            blks = []
            for ei, e in enumerate(pair):
                stride = 2 if (reduction and e.source < 2) else 1
                blk = blocks.build_op(e.op, c, stride, cfg, rng)
                self.add_child(f"node{ni + 2}.edge{ei}", blk)
                sources.append(e.source)
                blks.append(blk)
            self.node_sources.append(sources)
            self.node_blocks.append(blks)
        self.concat = sorted(spec.concat)
        self.out_channels = len(self.concat) * c

    def forward(self, s0, s1, drop_path_p: float = 0.0, droppath_rng=None):
        states = [self.pre0(s0), self.pre1(s1)]
        for sources, blks in zip(self.node_sources, self.node_blocks):
            parts = []
            for src, blk in zip(sources, blks):
                h = blk(states[src])
                if (self.training and drop_path_p > 0.0
                        and not getattr(blk, "is_identity", False)):
                    h = _drop_path(h, drop_path_p, droppath_rng)
                parts.append(h)
            states.append(ops.add(*parts))
        return ops.concat_channels([states[i] for i in self.concat])


def _drop_path(x: Tensor, p: float, rng) -> Tensor:
    keep = (rng.random(x.shape[0]) >= p).astype(x.data.dtype) / (1.0 - p)
    return ops.scale(x, keep[:, None, None, None])


class EvalNetwork(Module):
    def __init__(self, genotype: Genotype, plan: NetworkPlan, cfg: BlockConfig, rng):
        super().__init__()
        self.plan = plan
        c_stem = STEM_MULTIPLIER * plan.c_init
        self.stem = self.add_child("stem", Stem(c_stem, cfg, rng))
        c_pp = c_p = c_stem
        hw = plan.input_hw
        reduction_prev = False
        self.cells = []
        self.aux_head = None
        for i in range(plan.layers):
            c = plan.channels[i]
            red = i in plan.reduction_indices
            spec = genotype.reduce if red else genotype.normal
            cell = Cell(spec, c_pp, c_p, c, red, reduction_prev, cfg, rng)
            self.add_child(f"cell{i}", cell)
            self.cells.append(cell)
            c_pp, c_p = c_p, cell.out_channels
            if red:
                hw //= 2
            reduction_prev = red
            if plan.aux_index == i:
                self.aux_head = AuxiliaryHead(c_p, plan.num_classes, hw, cfg, rng)
                self.add_child("aux_head", self.aux_head)
        self.classifier = self.add_child("classifier", Linear(c_p, plan.num_classes, rng))

    def forward(self, x: Tensor, drop_path_p: float = 0.0, droppath_rng=None) -> ForwardResult:
        s0 = s1 = self.stem(x)
        aux_logits = None
        for i, cell in enumerate(self.cells):
            s0, s1 = s1, cell(s0, s1, drop_path_p, droppath_rng)
            if i == self.plan.aux_index and self.aux_head is not None and self.training:
                aux_logits = self.aux_head(s1)
        logits = self.classifier(ops.global_avg_pool(s1))
        return ForwardResult(logits=logits, aux_logits=aux_logits, features=s1)


def build_eval_network(genotype: Genotype, plan: NetworkPlan, rng,
                       cfg: Optional[BlockConfig] = None) -> EvalNetwork:
    if cfg is None:
        cfg = BlockConfig(C=plan.c_init, norm_affine=True)
    return EvalNetwork(genotype, plan, cfg, rng)
