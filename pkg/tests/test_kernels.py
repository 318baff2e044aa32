"""Backend agreement: every kernel gives the same answer on the numba and
numpy paths, and the adjoint kernels match finite differences."""

import numpy as np
import pytest

from causalmarket import kernels
from causalmarket.autodiff import finite_difference, relative_error

BACKENDS = sorted(kernels.IMPLEMENTATIONS)


def _rand(shape, seed, dtype=np.float64):
    return np.random.default_rng(seed).normal(size=shape).astype(dtype)


@pytest.fixture(params=BACKENDS)
def impls(request):
    return kernels.IMPLEMENTATIONS[request.param]


class TestParentSum:
    def test_matches_reference_loops(self, impls):
        w = _rand((2, 3, 3), 0)
        feats = _rand((4, 3, 2, 5), 1)
        out = impls["parent_sum"](w, feats)
        ref = np.zeros((4, 3, 5))
        for b in range(4):
            for l in range(2):
                for j in range(3):
                    for i in range(3):
                        ref[b, i] += w[l, j, i] * feats[b, j, l]
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_grad_w_matches_fd(self, impls):
        w = _rand((2, 2, 2), 2)
        feats = _rand((3, 2, 2, 4), 3)
        g = _rand((3, 2, 4), 4)

        def f(wv):
            return float(np.sum(impls["parent_sum"](wv, feats) * g))

        numeric = finite_difference(f, w)
        analytic = impls["parent_sum_grad_w"](g, feats)
        assert relative_error(analytic, numeric) < 1e-6

    def test_grad_feats_matches_fd(self, impls):
        w = _rand((2, 2, 2), 5)
        feats = _rand((2, 2, 2, 3), 6)
        g = _rand((2, 2, 3), 7)

        def f(fv):
            return float(np.sum(impls["parent_sum"](w, fv) * g))

        numeric = finite_difference(f, feats)
        analytic = impls["parent_sum_grad_feats"](g, w)
        assert relative_error(analytic, numeric) < 1e-6

    def test_backends_agree(self):
        if len(BACKENDS) < 2:
            pytest.skip("single backend available")
        w = _rand((3, 5, 5), 8)
        feats = _rand((6, 5, 3, 7), 9)
        outs = [kernels.IMPLEMENTATIONS[b]["parent_sum"](w, feats) for b in BACKENDS]
        np.testing.assert_allclose(outs[0], outs[1], rtol=1e-12)

    def test_zero_weight_blocks_input_exactly(self, impls):
        w = _rand((2, 3, 3), 10)
        w[1, 2, 0] = 0.0
        feats = _rand((2, 3, 2, 4), 11)
        base = impls["parent_sum"](w, feats)
        feats2 = feats.copy()
        feats2[:, 2, 1, :] += 123.456  # source stock 2 at lag 2 feeds target 0 with weight 0
        out2 = impls["parent_sum"](w, feats2)
        np.testing.assert_array_equal(base[:, 0, :], out2[:, 0, :])


class TestAdamKernel:
    def test_backends_agree(self):
        if len(BACKENDS) < 2:
            pytest.skip("single backend available")
        results = []
        for b in BACKENDS:
            p = _rand((50,), 12).copy()
            g = _rand((50,), 13)
            m = np.zeros(50)
            v = np.zeros(50)
            kernels.IMPLEMENTATIONS[b]["adam_update"](p, g, m, v, 0.01, 0.9, 0.999, 1e-8, 0.1, 0.001)
            results.append((p, m, v))
        for a, c in zip(results[0], results[1]):
            np.testing.assert_allclose(a, c, rtol=1e-12)


class TestLaggedRecurrence:
    def test_backends_agree(self):
        if len(BACKENDS) < 2:
            pytest.skip("single backend available")
        a = _rand((2, 4, 4), 14) * 0.2
        noise = _rand((60, 4), 15)
        outs = [kernels.IMPLEMENTATIONS[b]["lagged_recurrence"](a, noise, 2, 0) for b in BACKENDS]
        np.testing.assert_allclose(outs[0], outs[1], rtol=1e-10, atol=1e-12)

    def test_recurrence_definition(self, impls):
        a = _rand((1, 2, 2), 16) * 0.3
        noise = _rand((5, 2), 17)
        x = impls["lagged_recurrence"](a, noise, 1, 0)
        np.testing.assert_allclose(x[0], noise[0], rtol=1e-12)
        expect = x[1] @ a[0] + noise[2]
        np.testing.assert_allclose(x[2], expect, rtol=1e-12)

    def test_tanh_link(self, impls):
        a = _rand((1, 2, 2), 18) * 5.0
        noise = np.zeros((4, 2))
        noise[0] = [3.0, -3.0]
        x = impls["lagged_recurrence"](a, noise, 1, 1)
        assert np.all(np.abs(x[1:]) <= 1.0)
