import subprocess
import sys

import numpy as np
import pytest

from pibconv.engine import backend

numba_available = True
try:
    import numba  # noqa: F401
except ImportError:
    numba_available = False

needs_numba = pytest.mark.skipif(not numba_available, reason="numba not installed")


CONV_CASES = [
    # n, cin, h, w, cout, k, stride, pad, dil, groups
    (2, 4, 9, 9, 4, 3, 1, 1, 1, 4),    # depthwise 3x3
    (2, 6, 8, 8, 6, 5, 2, 2, 1, 6),    # depthwise 5x5 stride 2
    (1, 4, 11, 11, 4, 7, 1, 3, 1, 4),  # depthwise 7x7
    (2, 4, 8, 8, 4, 3, 1, 2, 2, 4),    # depthwise dilated
    (2, 5, 7, 7, 8, 1, 1, 0, 1, 1),    # pointwise
    (2, 4, 8, 8, 6, 3, 2, 1, 1, 1),    # dense strided
    (1, 6, 8, 8, 6, 3, 1, 1, 1, 2),    # grouped, 2 groups
]


def _rand_conv(case, seed):
    n, cin, h, w, cout, k, s, p, d, g = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
    wt = rng.standard_normal((cout, cin // g, k, k)).astype(np.float32)
    return x, wt, (s, s, p, p, d, d, g)


@needs_numba
class TestBackendAgreement:
    @pytest.mark.parametrize("case", CONV_CASES, ids=lambda c: "x".join(map(str, c)))
    def test_conv_fwd_bwd(self, case):
        x, w, args = _rand_conv(case, seed=hash(case) % 2**32)
        with backend.use_backend("numpy") as knp:
            y_np = knp.conv2d_fwd(x, w, *args)
            gy = np.random.default_rng(0).standard_normal(y_np.shape).astype(np.float32)
            gx_np = knp.conv2d_bwd_x(gy, w, x.shape, *args)
            gw_np = knp.conv2d_bwd_w(gy, x, w.shape, *args)
        with backend.use_backend("numba") as knb:
            y_nb = knb.conv2d_fwd(x, w, *args)
            gx_nb = knb.conv2d_bwd_x(gy, w, x.shape, *args)
            gw_nb = knb.conv2d_bwd_w(gy, x, w.shape, *args)
        np.testing.assert_allclose(y_nb, y_np, atol=1e-4, rtol=1e-4)
        np.testing.assert_allclose(gx_nb, gx_np, atol=1e-4, rtol=1e-4)
        np.testing.assert_allclose(gw_nb, gw_np, atol=1e-3, rtol=1e-4)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_maxpool_random(self, stride):
        x = np.random.default_rng(1).standard_normal((2, 3, 9, 9)).astype(np.float32)
        self._check_maxpool(x, stride)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_maxpool_ties(self, stride):
        # constant and small-integer inputs force many within-window ties;
        # both backends must route gradient to the same (first) argmax
        x = np.zeros((1, 2, 8, 8), dtype=np.float32)
        self._check_maxpool(x, stride)
        x = np.random.default_rng(2).integers(0, 3, (2, 2, 8, 8)).astype(np.float32)
        self._check_maxpool(x, stride)

    def _check_maxpool(self, x, stride):
        with backend.use_backend("numpy") as knp:
            y_np, ctx_np = knp.maxpool3_fwd(x, stride)
            gy = np.random.default_rng(3).standard_normal(y_np.shape).astype(np.float32)
            gx_np = knp.maxpool3_bwd(gy, x, y_np, ctx_np, stride)
        with backend.use_backend("numba") as knb:
            y_nb, ctx_nb = knb.maxpool3_fwd(x, stride)
            gx_nb = knb.maxpool3_bwd(gy, x, y_nb, ctx_nb, stride)
        np.testing.assert_array_equal(y_nb, y_np)
        # overlapping windows accumulate in different orders; values agree
        np.testing.assert_allclose(gx_nb, gx_np, atol=1e-5)
        # one-hot probes isolate single windows: routing (and therefore the
        # tie-break choice) must match exactly
        n, c, ho, wo = y_np.shape
        probes = [(0, 0, 0, 0), (n - 1, c - 1, ho - 1, wo - 1),
                  (0, c // 2, ho // 2, wo // 2), (n - 1, 0, 1 % ho, wo // 3)]
        for pos in probes:
            onehot = np.zeros(y_np.shape, dtype=np.float32)
            onehot[pos] = 1.0
            a = knp.maxpool3_bwd(onehot, x, y_np, ctx_np, stride)
            b = knb.maxpool3_bwd(onehot, x, y_nb, ctx_nb, stride)
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (5, 3, 0)])
    def test_avgpool(self, k, stride, pad):
        x = np.random.default_rng(4).standard_normal((2, 3, 11, 11)).astype(np.float32)
        with backend.use_backend("numpy") as knp:
            y_np = knp.avgpool2d_fwd(x, k, k, stride, stride, pad, pad)
            gy = np.random.default_rng(5).standard_normal(y_np.shape).astype(np.float32)
            gx_np = knp.avgpool2d_bwd(gy, x.shape, k, k, stride, stride, pad, pad)
        with backend.use_backend("numba") as knb:
            y_nb = knb.avgpool2d_fwd(x, k, k, stride, stride, pad, pad)
            gx_nb = knb.avgpool2d_bwd(gy, x.shape, k, k, stride, stride, pad, pad)
        np.testing.assert_allclose(y_nb, y_np, atol=1e-5)
        np.testing.assert_allclose(gx_nb, gx_np, atol=1e-5)


class TestSelection:
    def test_use_backend_restores(self):
        before = backend.backend_name()
        with backend.use_backend("numpy"):
            assert backend.backend_name() == "numpy"
        assert backend.backend_name() == before

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError, match="unknown backend"):
            with backend.use_backend("cuda"):
                pass

    def test_env_var_forces_numpy(self):
        code = ("import pibconv.engine.backend as b; print(b.backend_name()); "
                "print(b.kernels().__name__)")
        out = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True, text=True, check=True,
            env={"PIBCONV_BACKEND": "numpy", "PATH": "/usr/bin:/bin"},
        ).stdout.split()
        assert out[0] == "numpy"
        assert out[1].endswith("kernels_numpy")

    @needs_numba
    def test_env_var_forces_numba(self):
        code = "import pibconv.engine.backend as b; print(b.backend_name())"
        out = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True, text=True, check=True,
            env={"PIBCONV_BACKEND": "numba", "PATH": "/usr/bin:/bin"},
        ).stdout.strip()
        assert out == "numba"

    def test_bad_env_var_fails_loudly(self):
        code = "import pibconv.engine.backend as b; b.kernels()"
        r = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True, text=True,
            env={"PIBCONV_BACKEND": "opencl", "PATH": "/usr/bin:/bin"},
        )
        assert r.returncode != 0
        assert "unknown backend" in r.stderr
