import io
import logging
from itertools import combinations, product

import numpy as np
import pytest

from pibconv import data
from pibconv.engine import ops
from pibconv.engine.tensor import Tensor
from pibconv.genotype import NUM_CANDIDATE_EDGES, OpKind, resolve_op
from pibconv.supernet import (
    ArchParams,
    SearchConfig,
    SearchNetwork,
    TRAJECTORY_HEADER,
    arch_gradients,
    derive_genotype,
    first_order_arch_grads,
    run_search,
    second_order_arch_grads,
    write_trajectory_rows,
)

TOY_OPS = tuple(resolve_op(n) for n in ("none", "skip_connect", "max_pool_3x3"))


def _softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# bilevel gradients on an analytic bilinear toy
# ---------------------------------------------------------------------------


class Bilinear:
    """train(w, a) = w A a + lam/2 |w|^2 ; val(w, a) = w B a + c.w
    All closed-form gradients of the one-step-unrolled objective are
    available analytically."""

    def __init__(self, k=4, m=3, lam=0.7, seed=0):
        rng = np.random.default_rng(seed)
        self.A = rng.standard_normal((k, m))
        self.B = rng.standard_normal((k, m))
        self.c = rng.standard_normal(k)
        self.lam = lam
        self.w = Tensor(rng.standard_normal((1, k)), traced=True)
        self.a = Tensor(rng.standard_normal((1, m)), traced=True)
        self.At = Tensor(self.A.T.copy())  # [m, k], linear computes x @ w
        self.Bt = Tensor(self.B.T.copy())
        self.ct = Tensor(self.c[None, :].copy())

    def train_loss(self):
        aa = ops.linear(self.a, self.At)  # [1, k] = (A a)^T
        quad = ops.scale(ops.sum_all(ops.mul(self.w, self.w)), self.lam / 2)
        return ops.add(ops.sum_all(ops.mul(self.w, aa)), quad)

    def val_loss(self):
        ba = ops.linear(self.a, self.Bt)
        lin = ops.sum_all(ops.mul(self.w, self.ct))
        return ops.add(ops.sum_all(ops.mul(self.w, ba)), lin)

    def analytic_unrolled_arch_grad(self, xi):
        w = self.w.data[0]
        a = self.a.data[0]
        gw_train = self.A @ a + self.lam * w
        w_virt = w - xi * gw_train
        gw_val = self.B @ a + self.c  # gradient of val wrt w at w_virt
        return self.B.T @ w_virt - xi * (self.A.T @ gw_val)


class TestBilevel:
    def test_second_order_matches_analytic(self):
        toy = Bilinear()
        xi = 0.31
        _, ga, info = second_order_arch_grads(
            toy.train_loss, toy.val_loss, [toy.w], [toy.a], xi)
        assert info["corrected"] is True
        expect = toy.analytic_unrolled_arch_grad(xi)
        np.testing.assert_allclose(ga[0][0], expect, atol=1e-3)

    def test_xi_zero_equals_first_order(self):
        toy = Bilinear(seed=3)
        _, ga2, info = second_order_arch_grads(
            toy.train_loss, toy.val_loss, [toy.w], [toy.a], 0.0)
        _, ga1, _ = first_order_arch_grads(toy.val_loss, [toy.a])
        assert info["corrected"] is False
        assert np.abs(ga2[0] - ga1[0]).max() < 1e-7

    def test_zero_val_grad_skips_with_warning(self, caplog):
        toy = Bilinear(seed=4)
        toy.B[:] = 0.0
        toy.Bt = Tensor(toy.B.T.copy())
        toy.c[:] = 0.0
        toy.ct = Tensor(toy.c[None, :].copy())
        w_before = toy.w.data.copy()
        with caplog.at_level(logging.WARNING, logger="pibconv.supernet"):
            _, ga, info = second_order_arch_grads(
                toy.train_loss, toy.val_loss, [toy.w], [toy.a], 0.5)
        assert info["corrected"] is False
        assert any("zero" in r.message for r in caplog.records)
        np.testing.assert_array_equal(toy.w.data, w_before)  # weights restored
        np.testing.assert_allclose(ga[0], 0.0, atol=1e-12)

    def test_weights_restored_after_correction(self):
        toy = Bilinear(seed=5)
        w_before = toy.w.data.copy()
        second_order_arch_grads(toy.train_loss, toy.val_loss, [toy.w], [toy.a], 0.2)
        np.testing.assert_array_equal(toy.w.data, w_before)

    def test_order_dispatch(self):
        toy = Bilinear(seed=6)
        with pytest.raises(ValueError):
            arch_gradients(toy.train_loss, toy.val_loss, [toy.w], [toy.a], 0.1,
                           order="third")


# ---------------------------------------------------------------------------
# derivation vs exhaustive search
# ---------------------------------------------------------------------------


def brute_force_cell(alpha, op_set):
    """Enumerate all edge pairs and op labelings per node; maximize total
    softmax weight with lexicographic (edge, then op index) tie-breaks.
    Returns per-node sets of (source, op)."""
    w = _softmax(np.asarray(alpha, dtype=np.float64))
    non_none = [k for k, op in enumerate(op_set) if op is not OpKind.NONE]
    nodes = []
    offset = 0
    for node in range(4):
        n_in = node + 2
        best_key = None
        best_pick = None
        for j1, j2 in combinations(range(n_in), 2):
            for k1, k2 in product(non_none, repeat=2):
                score = w[offset + j1, k1] + w[offset + j2, k2]
                key = (-score, j1, j2, k1, k2)
                if best_key is None or key < best_key:
                    best_key = key
                    best_pick = {(j1, op_set[k1]), (j2, op_set[k2])}
        nodes.append(best_pick)
        offset += n_in
    return nodes


def _as_sets(cell):
    return [set((e.source, e.op) for e in pair) for pair in cell.node_edges]


class TestDerive:
    @pytest.mark.parametrize("op_set", [TOY_OPS, None], ids=["3op", "10op"])
    def test_matches_brute_force_random(self, op_set):
        from pibconv.genotype import SEARCH_OPS
        ops_ = op_set or SEARCH_OPS
        rng = np.random.default_rng(42)
        for _ in range(100):
            an = rng.standard_normal((NUM_CANDIDATE_EDGES, len(ops_)))
            ar = rng.standard_normal((NUM_CANDIDATE_EDGES, len(ops_)))
            g = derive_genotype(an, ar, ops_)
            assert _as_sets(g.normal) == brute_force_cell(an, ops_)
            assert _as_sets(g.reduce) == brute_force_cell(ar, ops_)

    def test_tie_breaks_lower_edge_then_lower_op(self):
        ops_ = TOY_OPS
        alpha = np.zeros((NUM_CANDIDATE_EDGES, len(ops_)))  # everything ties
        g = derive_genotype(alpha, alpha, ops_)
        for pair in g.normal.node_edges:
            assert {e.source for e in pair} == {0, 1}  # lowest edges win
            assert all(e.op is OpKind.SKIP_CONNECT for e in pair)  # lowest non-none
        assert _as_sets(g.normal) == brute_force_cell(alpha, ops_)

    def test_none_never_selected_even_if_strongest(self):
        ops_ = TOY_OPS
        alpha = np.zeros((NUM_CANDIDATE_EDGES, len(ops_)))
        alpha[:, 0] = 10.0  # 'none' dominates every edge
        g = derive_genotype(alpha, alpha, ops_)
        chosen = {e.op for pair in g.normal.node_edges for e in pair}
        assert OpKind.NONE not in chosen

    def test_shape_validated(self):
        with pytest.raises(ValueError):
            derive_genotype(np.zeros((3, 3)), np.zeros((3, 3)), TOY_OPS)


# ---------------------------------------------------------------------------
# supernet and search loop
# ---------------------------------------------------------------------------


class TestSearchNetwork:
    def test_forward_shapes_and_mixing(self):
        rng = np.random.default_rng(0)
        net = SearchNetwork(TOY_OPS, layers=2, c_init=4, num_classes=5,
                            input_hw=8, rng=rng)
        arch = ArchParams(TOY_OPS, rng)
        net.set_training(True)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        logits = net.forward(x, arch)
        assert logits.shape == (2, 5)
        assert arch.alpha_normal.shape == (NUM_CANDIDATE_EDGES, 3)

    def test_norms_non_affine_in_search(self):
        net = SearchNetwork(TOY_OPS, layers=1, c_init=4, num_classes=2,
                            input_hw=8, rng=np.random.default_rng(0))
        kinds = {k for _, _, k in net.named_params()}
        assert "norm" not in kinds

    def test_trajectory_rows_format(self):
        arch = ArchParams(TOY_OPS, np.random.default_rng(1))
        buf = io.StringIO()
        buf.write(TRAJECTORY_HEADER)
        write_trajectory_rows(buf, 7, arch)
        lines = buf.getvalue().strip().split("\n")
        assert lines[0] == "epoch,cell_type,edge,op,weight"
        assert len(lines) == 1 + 2 * NUM_CANDIDATE_EDGES * len(TOY_OPS)
        first = lines[1].split(",")
        assert first[:4] == ["7", "normal", "0", "none"]
        total = sum(float(l.split(",")[4]) for l in lines[1:1 + len(TOY_OPS)])
        assert abs(total - 1.0) < 1e-6


class TestRunSearch:
    def test_tiny_search_deterministic(self, tmp_path):
        x, y = data.make_synthetic(seed=2, n=32, classes=3, hw=8)
        cfg = SearchConfig(epochs=1, batch_size=8, layers=1, c_init=4,
                           num_classes=3, input_hw=8, seed=2, order="first",
                           op_set=tuple(op.value for op in TOY_OPS))
        r1 = run_search(cfg, x, y, trajectory_path=tmp_path / "t1.csv")
        r2 = run_search(cfg, x, y, trajectory_path=tmp_path / "t2.csv")
        np.testing.assert_array_equal(r1.alpha_normal, r2.alpha_normal)
        assert (tmp_path / "t1.csv").read_bytes() == (tmp_path / "t2.csv").read_bytes()
        assert r1.genotype == r2.genotype
        assert len(r1.history) == 1

    def test_second_order_step_runs(self):
        x, y = data.make_synthetic(seed=3, n=32, classes=3, hw=8)
        cfg = SearchConfig(epochs=1, batch_size=16, layers=1, c_init=4,
                           num_classes=3, input_hw=8, seed=3, order="second",
                           op_set=tuple(op.value for op in TOY_OPS))
        res = run_search(cfg, x, y)
        assert np.isfinite(res.history[0]["val_loss"])

    def test_needs_enough_samples(self):
        x, y = data.make_synthetic(seed=4, n=8, classes=2, hw=8)
        cfg = SearchConfig(epochs=1, batch_size=64, layers=1, c_init=4,
                           num_classes=2, input_hw=8,
                           op_set=tuple(op.value for op in TOY_OPS))
        with pytest.raises(ValueError):
            run_search(cfg, x, y)

    def test_bad_order_rejected(self):
        with pytest.raises(ValueError):
            SearchConfig(order="zeroth")

    def test_bad_op_name_rejected(self):
        with pytest.raises(Exception):
            SearchConfig(op_set=("none", "warp_conv_9x9"))
