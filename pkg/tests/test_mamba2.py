"""Tests for the SSD kernels and the Mamba-2 block."""

import numpy as np
import pytest

from taipan.attention import linear_attention_matmul
from taipan.mamba2 import (
    Mamba2Block,
    decay_matrix,
    decay_matrix_reference,
    ssd_matrix,
    ssd_matrix_form_t,
    ssd_recurrent,
)
from taipan.tensor import Tensor, finite_difference_check, record


def _rng(seed=0):
    return np.random.default_rng(seed)


def _random_instance(rng, L=None, dh=None, ds=None, amin=0.01):
    L = L or int(rng.integers(1, 65))
    dh = dh or int(rng.integers(1, 9))
    ds = ds or int(rng.integers(1, 9))
    x = rng.standard_normal((L, dh))
    a = rng.uniform(amin, 1.0, size=L)
    B = rng.standard_normal((L, ds))
    C = rng.standard_normal((L, ds))
    return x, a, B, C


class TestDecayMatrix:
    def test_matches_literal_definition(self):
        rng = _rng(1)
        for _ in range(10):
            a = rng.uniform(0.01, 1.0, size=int(rng.integers(1, 20)))
            assert np.max(np.abs(decay_matrix(a) - decay_matrix_reference(a))) < 1e-12

    def test_structure_invariants(self):
        a = _rng(2).uniform(0.1, 1.0, size=12)
        D = decay_matrix(a)
        assert np.array_equal(np.diag(D), np.ones(12))
        assert np.all(D[np.triu_indices(12, 1)] == 0.0)
        # left-neighbour recursion: D[i, j] = D[i, j+1] * a[j+1]
        for i in range(12):
            for j in range(i):
                assert D[i, j] == pytest.approx(D[i, j + 1] * a[j + 1], rel=1e-12)

    def test_exact_zero_decay_resets(self):
        a = np.array([0.5, 0.0, 0.8, 0.9])
        D = decay_matrix(a)
        assert D[3, 2] == pytest.approx(0.9)
        assert D[2, 0] == 0.0 and D[3, 0] == 0.0 and D[1, 0] == 0.0
        assert np.max(np.abs(D - decay_matrix_reference(a))) < 1e-15

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            decay_matrix(np.array([0.5, 1.2]))


class TestSSDKernels:
    def test_all_ones_decay_is_cumsum(self):
        """a=1, B=C=[1], d_state=1 turns the SSD into a running sum."""
        x = _rng(3).standard_normal((9, 4))
        ones = np.ones((9, 1))
        y, h = ssd_recurrent(x, np.ones(9), ones, ones)
        assert np.allclose(y, np.cumsum(x, axis=0), atol=1e-12)
        assert np.allclose(h[0], x.sum(axis=0))

    def test_zero_decay_is_memoryless(self):
        """a=0 resets the state each step: o_t = (C_t . B_t) x_t."""
        rng = _rng(4)
        x, _, B, C = _random_instance(rng, L=7)
        y, _ = ssd_recurrent(x, np.zeros(7), B, C)
        expected = (C * B).sum(axis=1, keepdims=True) * x
        assert np.allclose(y, expected, atol=1e-12)

    def test_recurrent_equals_matrix_form(self):
        """Dual forms agree to fp64 accumulation error on random instances."""
        rng = _rng(5)
        for _ in range(25):
            x, a, B, C = _random_instance(rng)
            y_r, _ = ssd_recurrent(x, a, B, C)
            y_m = ssd_matrix(x, a, B, C)
            assert np.max(np.abs(y_r - y_m)) < 1e-9

    def test_all_ones_decay_equals_linear_attention(self):
        """With a=1 the SSD is unnormalized linear attention (Q:=C, K:=B)."""
        rng = _rng(6)
        for _ in range(5):
            x, _, B, C = _random_instance(rng, L=32)
            y_ssd = ssd_matrix(x, np.ones(32), B, C)
            y_lin = linear_attention_matmul(C, B, x, phi="identity", normalize=False)
            assert np.max(np.abs(y_ssd - y_lin)) < 1e-10

    def test_chunked_state_carry_equals_unchunked(self):
        """Splitting the scan and carrying the state matches one long scan."""
        rng = _rng(7)
        x, a, B, C = _random_instance(rng, L=48)
        y_full, h_full = ssd_recurrent(x, a, B, C)
        parts = []
        h = None
        for lo, hi in ((0, 13), (13, 30), (30, 48)):
            y, h = ssd_recurrent(x[lo:hi], a[lo:hi], B[lo:hi], C[lo:hi], h0=h)
            parts.append(y)
        y_chunked = np.concatenate(parts, axis=0)
        assert np.max(np.abs(y_chunked - y_full)) < 1e-12
        assert np.max(np.abs(h - h_full)) < 1e-12

    def test_graph_form_matches_ndarray_form(self):
        rng = _rng(8)
        n, H, L, dh, ds = 2, 3, 11, 4, 5
        x = rng.standard_normal((n, H, L, dh))
        a = rng.uniform(0.05, 1.0, size=(n, H, L))
        B = rng.standard_normal((n, H, L, ds))
        C = rng.standard_normal((n, H, L, ds))
        out = ssd_matrix_form_t(Tensor(x), Tensor(a), Tensor(B), Tensor(C)).data
        for i in range(n):
            for h in range(H):
                expected = ssd_matrix(x[i, h], a[i, h], B[i, h], C[i, h])
                assert np.max(np.abs(out[i, h] - expected)) < 1e-10

    def test_graph_form_gradients(self):
        rng = _rng(9)
        n, H, L, dh, ds = 1, 2, 6, 3, 2
        x = Tensor(rng.standard_normal((n, H, L, dh)), requires_grad=True)
        a = Tensor(rng.uniform(0.2, 0.95, size=(n, H, L)), requires_grad=True)
        B = Tensor(rng.standard_normal((n, H, L, ds)), requires_grad=True)
        C = Tensor(rng.standard_normal((n, H, L, ds)), requires_grad=True)
        coeff = Tensor(rng.standard_normal((n, H, L, dh)))

        def f():
            return (ssd_matrix_form_t(x, a, B, C) * coeff).sum()

        err = finite_difference_check(f, [x, a, B, C])
        assert err < 1e-6, f"fd mismatch {err}"


class TestMamba2Block:
    @pytest.fixture
    def block(self):
        return Mamba2Block(_rng(10), 16, d_state=4, n_heads=2, expand=2, conv_kernel=4)

    def test_forward_shape(self, block):
        x = Tensor(_rng(11).standard_normal((2, 9, 16)))
        assert block.forward(x).shape == (2, 9, 16)

    def test_residual_identity_with_zero_projections(self, block):
        """Zeroing both residual write projections turns the block into identity."""
        block.w_out.data[:] = 0.0
        block.mlp.w_down.data[:] = 0.0
        x = _rng(12).standard_normal((1, 5, 16))
        out = block.forward(Tensor(x)).data
        assert np.array_equal(out, x)

    def test_causality(self, block):
        """Perturbing token t leaves outputs before t bit-identical."""
        x = _rng(13).standard_normal((1, 8, 16))
        base = block.forward(Tensor(x)).data
        x2 = x.copy()
        x2[0, 5] += 10.0
        pert = block.forward(Tensor(x2)).data
        assert np.array_equal(base[0, :5], pert[0, :5])
        assert not np.allclose(base[0, 5:], pert[0, 5:])

    def test_step_matches_forward(self, block):
        """Token-by-token decode reproduces the parallel forward pass."""
        x = _rng(14).standard_normal((1, 12, 16))
        ref = block.forward(Tensor(x)).data[0]
        state = block.alloc_state()
        outs = np.stack([block.step(x[0, t], state) for t in range(12)])
        assert np.max(np.abs(outs - ref)) < 1e-12

    def test_state_size_constant(self, block):
        state = block.alloc_state()
        before = state.nbytes
        for t in range(50):
            block.step(np.zeros(16), state)
        assert state.nbytes == before

    def test_block_gradients_end_to_end(self):
        """Full block backward agrees with central differences on every param."""
        rng = _rng(15)
        block = Mamba2Block(rng, 8, d_state=3, n_heads=1, expand=2, conv_kernel=3)
        x = Tensor(rng.standard_normal((1, 5, 8)))
        coeff = Tensor(rng.standard_normal((1, 5, 8)))
        params = [p for _, p in block.params("blk")]

        def f():
            return (block.forward(x) * coeff).sum()

        err = finite_difference_check(f, params)
        assert err < 1e-4, f"fd mismatch {err}"
