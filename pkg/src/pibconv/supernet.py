"""Differentiable architecture search over a weight-sharing supernet.

Every candidate edge holds one block per candidate op; edge outputs are
mixed with softmaxed architecture weights.  Architecture parameters are
updated on the validation half of the data (optionally with the
second-order correction), network weights on the training half.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import blocks, rng as rng_mod
from .blocks import ActConvNorm, BlockConfig, FactorizedReduce, Linear, Module, Stem
from .costmodel import STEM_MULTIPLIER
from .engine import Tape, ops
from .engine.optim import AdamState, SGDState, adam_step, clip_grad_norm, cosine_lr, sgd_step
from .engine.tensor import Tensor, zero_grads
from .genotype import (
    EDGES_PER_NODE,
    NUM_CANDIDATE_EDGES,
    NUM_NODES,
    SEARCH_OPS,
    CellSpec,
    Edge,
    Genotype,
    OpKind,
    plan_network,
    resolve_op,
)
from .trainer import DivergenceError

logger = logging.getLogger(__name__)

__all__ = [
    "ArchParams",
    "SearchConfig",
    "SearchNetwork",
    "SearchResult",
    "arch_gradients",
    "derive_genotype",
    "first_order_arch_grads",
    "run_search",
    "second_order_arch_grads",
    "write_trajectory_rows",
]


# ---------------------------------------------------------------------------
# architecture parameters
# ---------------------------------------------------------------------------


class ArchParams:
    """Two trainable logit matrices, one per cell type, shape
    [num_candidate_edges, num_ops]."""

    def __init__(self, op_set: Sequence[OpKind], rng, init_scale: float = 1e-3):
        self.op_set = tuple(op_set)
        n = len(self.op_set)
        self.alpha_normal = Tensor(
            (init_scale * rng.standard_normal((NUM_CANDIDATE_EDGES, n))).astype(np.float32),
            traced=True,
        )
        self.alpha_reduce = Tensor(
            (init_scale * rng.standard_normal((NUM_CANDIDATE_EDGES, n))).astype(np.float32),
            traced=True,
        )

    def parameters(self) -> List[Tensor]:
        return [self.alpha_normal, self.alpha_reduce]

    def weights(self) -> Tuple[np.ndarray, np.ndarray]:
        """Softmaxed weights as plain float64 arrays (reporting only)."""
        return (_softmax_np(self.alpha_normal.data), _softmax_np(self.alpha_reduce.data))


def _softmax_np(a: np.ndarray) -> np.ndarray:
    z = np.asarray(a, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# supernet modules
# ---------------------------------------------------------------------------


class MixedOp(Module):
    def __init__(self, op_set: Sequence[OpKind], c: int, stride: int, cfg: BlockConfig, rng):
        super().__init__()
        self.blocks = []
        for i, kind in enumerate(op_set):
            blk = blocks.build_op(kind, c, stride, cfg, rng)
            self.add_child(f"op{i}", blk)
            self.blocks.append(blk)

    def forward(self, x, weights: Tensor, row: int):
        return ops.mix([blk(x) for blk in self.blocks], weights, row)


class SearchCell(Module):
    def __init__(self, op_set, c_pp: int, c_p: int, c: int,
                 reduction: bool, reduction_prev: bool, cfg: BlockConfig, rng):
        super().__init__()
        self.reduction = reduction
        if reduction_prev:
            self.pre0 = self.add_child("pre0", FactorizedReduce(c_pp, c, cfg, rng))
        else:
            self.pre0 = self.add_child("pre0", ActConvNorm(c_pp, c, cfg, rng))
        self.pre1 = self.add_child("pre1", ActConvNorm(c_p, c, cfg, rng))
        self.edges = []  # flat, node-major then source-ascending
        e = 0
        for node in range(NUM_NODES):
            for src in range(node + 2):
                stride = 2 if (reduction and src < 2) else 1
                op = MixedOp(op_set, c, stride, cfg, rng)
                self.add_child(f"edge{e}", op)
                self.edges.append(op)
                e += 1
        self.out_channels = NUM_NODES * c

    def forward(self, s0, s1, weights: Tensor):
        states = [self.pre0(s0), self.pre1(s1)]
        e = 0
        for node in range(NUM_NODES):
            parts = []
            for src in range(node + 2):
                parts.append(self.edges[e](states[src], weights, e))
                e += 1
            states.append(ops.add(*parts))
        return ops.concat_channels(states[2:])


class SearchNetwork(Module):
    """Weight-sharing supernet.  Norm layers are non-affine here so that
    scale information lives only in the mixing weights."""

    def __init__(self, op_set, layers: int, c_init: int, num_classes: int,
                 input_hw: int, rng, cfg: Optional[BlockConfig] = None):
        super().__init__()
        if cfg is None:
            cfg = BlockConfig(C=c_init, norm_affine=False)
        self.plan = plan_network(layers, c_init, num_classes, input_hw, aux=False)
        c_stem = STEM_MULTIPLIER * c_init
        self.stem = self.add_child("stem", Stem(c_stem, cfg, rng))
        c_pp = c_p = c_stem
        reduction_prev = False
        self.cells = []
        for i in range(layers):
            c = self.plan.channels[i]
            red = i in self.plan.reduction_indices
            cell = SearchCell(op_set, c_pp, c_p, c, red, reduction_prev, cfg, rng)
            self.add_child(f"cell{i}", cell)
            self.cells.append(cell)
            c_pp, c_p = c_p, cell.out_channels
            reduction_prev = red
        self.classifier = self.add_child("classifier", Linear(c_p, num_classes, rng))

    def forward(self, x: Tensor, arch: ArchParams) -> Tensor:
        wn = ops.softmax_rows(arch.alpha_normal)
        wr = ops.softmax_rows(arch.alpha_reduce)
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, wr if cell.reduction else wn)
        return self.classifier(ops.global_avg_pool(s1))


# ---------------------------------------------------------------------------
# bilevel gradients
# ---------------------------------------------------------------------------


def _loss_and_grads(loss_fn: Callable[[], Tensor], param_groups):
    """Run loss_fn under a fresh tape and return (loss_value,
    per-group gradient lists).  Parameter .grad slots are left cleared."""
    with Tape() as tape:
        loss = loss_fn()
    flat = [p for group in param_groups for p in group]
    zero_grads(flat)
    tape.backward(loss, leaves=flat)
    grads = [[p.grad for p in group] for group in param_groups]
    zero_grads(flat)
    return float(loss.data), grads


def first_order_arch_grads(val_loss_fn, a_params):
    """Architecture gradient ignoring the weight response: just
    d(val loss)/d(alpha) at the current weights."""
    vl, (ga,) = _loss_and_grads(val_loss_fn, (a_params,))
    return vl, ga, {"corrected": False}


def second_order_arch_grads(train_loss_fn, val_loss_fn, w_params, a_params, xi: float):
    """Architecture gradient through a one-step virtual weight update.

    Weights take a virtual SGD step of size xi on the training loss, the
    validation gradient is taken at the stepped weights, and the
    response term is estimated with a central finite difference whose
    step is 0.01 / ||d(val)/d(w')||.  xi == 0 reduces exactly to the
    first-order gradient, so the correction is skipped.  A zero-norm
    validation gradient also skips the correction (with a warning),
    since the finite-difference step would be undefined.
    """
    if xi == 0.0:
        vl, ga, _ = first_order_arch_grads(val_loss_fn, a_params)
        return vl, ga, {"corrected": False, "skip_reason": "xi-zero"}

    _, (gw_train,) = _loss_and_grads(train_loss_fn, (w_params,))
    w0 = [p.data.copy() for p in w_params]
    for p, g in zip(w_params, gw_train):
        p.data = p.data - xi * g

    vl, (gw_val, ga) = _loss_and_grads(val_loss_fn, (w_params, a_params))
    sq = 0.0
    for g in gw_val:
        sq += float(np.vdot(g, g))
    norm = math.sqrt(sq)
    if norm == 0.0:
        for p, w in zip(w_params, w0):
            p.data = w
        logger.warning("validation gradient norm is zero; skipping second-order correction")
        return vl, ga, {"corrected": False, "skip_reason": "zero-val-grad"}

    eps = 0.01 / norm
    for p, w, g in zip(w_params, w0, gw_val):
        p.data = w + eps * g
    _, (ga_plus,) = _loss_and_grads(train_loss_fn, (a_params,))
    for p, w, g in zip(w_params, w0, gw_val):
        p.data = w - eps * g
    _, (ga_minus,) = _loss_and_grads(train_loss_fn, (a_params,))
    for p, w in zip(w_params, w0):
        p.data = w

    ga = [g - xi * (gp - gm) / (2.0 * eps) for g, gp, gm in zip(ga, ga_plus, ga_minus)]
    return vl, ga, {"corrected": True, "fd_eps": eps}


def arch_gradients(train_loss_fn, val_loss_fn, w_params, a_params, xi: float, order: str):
    if order == "second":
        return second_order_arch_grads(train_loss_fn, val_loss_fn, w_params, a_params, xi)
    if order == "first":
        return first_order_arch_grads(val_loss_fn, a_params)
    raise ValueError(f"order must be 'first' or 'second', got {order!r}")


# ---------------------------------------------------------------------------
# genotype derivation
# ---------------------------------------------------------------------------


def derive_genotype(alpha_normal: np.ndarray, alpha_reduce: np.ndarray,
                    op_set: Sequence[OpKind] = SEARCH_OPS) -> Genotype:
    """Read off the discrete cell: per node keep the two incoming edges
    with the largest best-non-'none' softmax weight, labelling each with
    that op.  Ties go to the lower edge index, then the lower op index.
    """
    op_set = tuple(op_set)
    return Genotype(
        normal=_derive_cell(np.asarray(alpha_normal, dtype=np.float64), op_set),
        reduce=_derive_cell(np.asarray(alpha_reduce, dtype=np.float64), op_set),
    )


def _derive_cell(alpha: np.ndarray, op_set) -> CellSpec:
    expect = (NUM_CANDIDATE_EDGES, len(op_set))
    if alpha.shape != expect:
        raise ValueError(f"alpha shape {alpha.shape} != {expect}")
    w = _softmax_np(alpha)
    node_edges = []
    offset = 0
    for node in range(NUM_NODES):
        n_in = node + 2
        ranked = []
        for src in range(n_in):
            row = w[offset + src]
            best_k = -1
            best_v = -np.inf
            for k, op in enumerate(op_set):
                if op is OpKind.NONE:
                    continue
                if row[k] > best_v:  # strict: ties keep the lower op index
                    best_v = row[k]
                    best_k = k
            ranked.append((best_v, src, best_k))
        ranked.sort(key=lambda t: (-t[0], t[1]))  # stable: lower src wins ties
        node_edges.append(tuple(
            Edge(op=op_set[k], source=src) for _, src, k in ranked[:EDGES_PER_NODE]
        ))
        offset += n_in
    return CellSpec(node_edges=tuple(node_edges))


# ---------------------------------------------------------------------------
# search driver
# ---------------------------------------------------------------------------


@dataclass
class SearchConfig:
    epochs: int = 50
    batch_size: int = 64
    layers: int = 8
    c_init: int = 16
    num_classes: int = 10
    input_hw: int = 32
    lr: float = 0.0025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    arch_lr: float = 3e-4
    arch_betas: Tuple[float, float] = (0.5, 0.999)
    arch_eps: float = 1e-8
    arch_weight_decay: float = 1e-3
    order: str = "second"
    xi: Optional[float] = None  # None: use the current weight lr
    grad_clip: float = 5.0
    seed: int = 0
    op_set: Tuple[str, ...] = tuple(op.value for op in SEARCH_OPS)

    def __post_init__(self):
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.resolved_ops = tuple(resolve_op(name) for name in self.op_set)


@dataclass
class SearchResult:
    genotype: Genotype
    alpha_normal: np.ndarray
    alpha_reduce: np.ndarray
    op_set: Tuple[str, ...]
    history: List[dict] = field(default_factory=list)


def write_trajectory_rows(fh, epoch: int, arch: ArchParams) -> None:
    """Append one epoch's worth of rows: epoch,cell_type,edge,op,weight."""
    wn, wr = arch.weights()
    for cell_type, w in (("normal", wn), ("reduce", wr)):
        for e in range(NUM_CANDIDATE_EDGES):
            for k, op in enumerate(arch.op_set):
                fh.write(f"{epoch},{cell_type},{e},{op.value},{w[e, k]:.8f}\n")


TRAJECTORY_HEADER = "epoch,cell_type,edge,op,weight\n"


def run_search(cfg: SearchConfig, data_x: np.ndarray, data_y: np.ndarray,
               trajectory_path=None, augment_fn=None,
               progress: Optional[Callable[[dict], None]] = None) -> SearchResult:
    """Bilevel search: alternate an architecture step (validation half)
    and a weight step (training half) per batch.  The data is split
    50/50; each half is reshuffled every epoch.
    """
    search_rng = rng_mod.stream(cfg.seed, "search")
    init_rng = rng_mod.stream(cfg.seed, "init")
    aug_rng = rng_mod.stream(cfg.seed, "augment")

    op_set = cfg.resolved_ops
    net = SearchNetwork(op_set, cfg.layers, cfg.c_init, cfg.num_classes, cfg.input_hw, init_rng)
    arch = ArchParams(op_set, init_rng)
    net.set_training(True)

    w_params = list(net.parameters())
    a_params = arch.parameters()
    w_state = SGDState(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    a_state = AdamState(betas=cfg.arch_betas, eps=cfg.arch_eps,
                        weight_decay=cfg.arch_weight_decay)

    n = len(data_x)
    half = n // 2
    xt_all, yt_all = data_x[:half], data_y[:half]
    xv_all, yv_all = data_x[half:2 * half], data_y[half:2 * half]
    if half < cfg.batch_size:
        raise ValueError(f"need at least {2 * cfg.batch_size} samples, got {n}")
    steps = half // cfg.batch_size

    history: List[dict] = []
    traj_fh = open(trajectory_path, "w") if trajectory_path is not None else None
    try:
        if traj_fh is not None:
            traj_fh.write(TRAJECTORY_HEADER)
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
            xi = cfg.xi if cfg.xi is not None else lr
            perm_t = search_rng.permutation(half)
            perm_v = search_rng.permutation(half)
            tl_sum = vl_sum = 0.0
            for step in range(steps):
                it = perm_t[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                iv = perm_v[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                xt = xt_all[it]
                if augment_fn is not None:
                    xt = augment_fn(xt, aug_rng)
                xt = Tensor(np.ascontiguousarray(xt))
                yt = yt_all[it]
                xv = Tensor(np.ascontiguousarray(xv_all[iv]))
                yv = yv_all[iv]

                def train_loss():
                    return ops.softmax_cross_entropy(net.forward(xt, arch), yt)

                def val_loss():
                    return ops.softmax_cross_entropy(net.forward(xv, arch), yv)

                vl, ga, _ = arch_gradients(train_loss, val_loss, w_params, a_params,
                                           xi, cfg.order)
                for p, g in zip(a_params, ga):
                    p.grad = g
                adam_step(a_params, a_state, cfg.arch_lr)
                zero_grads(a_params)

                tl, (gw,) = _loss_and_grads(train_loss, (w_params,))
                for p, g in zip(w_params, gw):
                    p.grad = g
                clip_grad_norm(w_params, cfg.grad_clip)
                sgd_step(w_params, w_state, lr)
                zero_grads(w_params)

                if not (math.isfinite(tl) and math.isfinite(vl)):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"train={tl} val={vl}")
                tl_sum += tl
                vl_sum += vl

            val_acc = _accuracy(net, arch, xv_all, yv_all, cfg.batch_size)
            rec = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": tl_sum / steps,
                "val_loss": vl_sum / steps,
                "val_acc": val_acc,
            }
            history.append(rec)
            if traj_fh is not None:
                write_trajectory_rows(traj_fh, epoch, arch)
            if progress is not None:
                progress(rec)
    finally:
        if traj_fh is not None:
            traj_fh.close()

    genotype = derive_genotype(arch.alpha_normal.data, arch.alpha_reduce.data, op_set)
    return SearchResult(
        genotype=genotype,
        alpha_normal=arch.alpha_normal.data.copy(),
        alpha_reduce=arch.alpha_reduce.data.copy(),
        op_set=tuple(op.value for op in op_set),
        history=history,
    )


def _accuracy(net: SearchNetwork, arch: ArchParams, x: np.ndarray, y: np.ndarray,
              batch: int) -> float:
    net.set_training(False)
    correct = 0
    for s in range(0, len(x), batch):
        logits = net.forward(Tensor(np.ascontiguousarray(x[s:s + batch])), arch)
        correct += int((logits.data.argmax(axis=1) == y[s:s + batch]).sum())
    net.set_training(True)
    return correct / len(x)
