"""From-scratch training of a derived genotype: SGD with cosine decay,
crop/flip plus cutout augmentation, linearly ramped drop-path, and an
auxiliary loss at 2/3 depth."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import data as data_mod, rng as rng_mod
from .engine import Tape, ops
from .engine.optim import SGDState, clip_grad_norm, cosine_lr, sgd_step
from .engine.tensor import Tensor, zero_grads
from .genotype import Genotype, plan_network
from .network import EvalNetwork, build_eval_network

__all__ = ["DivergenceError", "TrainConfig", "METRICS_HEADER", "train_eval", "evaluate"]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 96
    layers: int = 20
    c_init: int = 36
    num_classes: int = 10
    input_hw: int = 32
    lr: float = 0.0025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    drop_path: float = 0.2
    aux_weight: float = 0.4
    augment: bool = True
    cutout: bool = True
    cutout_length: int = 16
    seed: int = 0

    @property
    def use_aux(self) -> bool:
        # the auxiliary head sits at 2/3 depth, which needs >= 3 cells
        return self.aux_weight > 0 and self.layers >= 3


METRICS_HEADER = "epoch,lr,train_loss,train_acc,test_acc\n"


def train_eval(genotype: Genotype, train_set, test_set, cfg: TrainConfig,
               metrics_path=None,
               progress: Optional[Callable[[dict], None]] = None):
    """Train ``genotype`` from scratch; returns (model, history).  If
    ``metrics_path`` is given, one CSV row per epoch is appended as it
    completes.  Raises DivergenceError on a non-finite batch loss.
    """
    train_x, train_y = train_set
    test_x, test_y = test_set
    plan = plan_network(cfg.layers, cfg.c_init, cfg.num_classes, cfg.input_hw,
                        aux=cfg.use_aux)
    init_rng = rng_mod.stream(cfg.seed, "init")
    model = build_eval_network(genotype, plan, init_rng)

    sgd = SGDState(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    params = list(model.parameters())
    train_rng = rng_mod.stream(cfg.seed, "search")
    aug_rng = rng_mod.stream(cfg.seed, "augment")
    dp_rng = rng_mod.stream(cfg.seed, "droppath")

    n = len(train_x)
    steps = n // cfg.batch_size
    if steps == 0:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")

    history: List[dict] = []
    fh = open(metrics_path, "w") if metrics_path is not None else None
    try:
        if fh is not None:
            fh.write(METRICS_HEADER)
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
            dp = cfg.drop_path * epoch / cfg.epochs
            model.set_training(True)
            perm = train_rng.permutation(n)
            loss_sum = 0.0
            correct = 0
            seen = 0
            for step in range(steps):
                idx = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                xb = train_x[idx]
                if cfg.augment:
                    xb = data_mod.augment_batch(xb, aug_rng)
                if cfg.cutout:
                    xb = data_mod.cutout_batch(xb, cfg.cutout_length, aug_rng)
                yb = train_y[idx]
                xt = Tensor(np.ascontiguousarray(xb))
                with Tape() as tape:
                    out = model.forward(xt, drop_path_p=dp, droppath_rng=dp_rng)
                    loss = ops.softmax_cross_entropy(out.logits, yb)
                    if out.aux_logits is not None:
                        aux = ops.softmax_cross_entropy(out.aux_logits, yb)
                        loss = ops.add(loss, ops.scale(aux, cfg.aux_weight))
                lval = float(loss.data)
                if not math.isfinite(lval):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} step {step}: {lval}")
                zero_grads(params)
                tape.backward(loss, leaves=params)
                clip_grad_norm(params, cfg.grad_clip)
                sgd_step(params, sgd, lr)
                zero_grads(params)
                loss_sum += lval
                correct += int((out.logits.data.argmax(axis=1) == yb).sum())
                seen += len(yb)

            train_loss = loss_sum / steps
            train_acc = correct / seen
            test_acc = evaluate(model, test_x, test_y, cfg.batch_size)
            rec = {"epoch": epoch, "lr": lr, "train_loss": train_loss,
                   "train_acc": train_acc, "test_acc": test_acc}
            history.append(rec)
            if fh is not None:
                fh.write(f"{epoch},{lr:.8f},{train_loss:.6f},"
                         f"{train_acc:.6f},{test_acc:.6f}\n")
                fh.flush()
            if progress is not None:
                progress(rec)
    finally:
        if fh is not None:
            fh.close()
    return model, history


def evaluate(model: EvalNetwork, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    """Top-1 accuracy in eval mode (running norm statistics, no
    drop-path, no auxiliary head)."""
    model.set_training(False)
    correct = 0
    for s in range(0, len(x), batch_size):
        xb = Tensor(np.ascontiguousarray(x[s:s + batch_size]))
        out = model.forward(xb)
        correct += int((out.logits.data.argmax(axis=1) == y[s:s + batch_size]).sum())
    return correct / len(x)
