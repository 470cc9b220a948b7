from __future__ import annotations

import io
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from titans import mathops
from titans.errors import ShapeError


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = torch.zeros(n, m, dtype=a.dtype)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc = acc + a[i, t].item() * b[t, j].item()
            out[i, j] = acc
    return out


def conv_loop(seq, filters):
    n, c = seq.shape
    out = torch.zeros_like(seq)
    for t in range(n):
        for ch in range(c):
            for j in range(filters.shape[1]):
                if t - j >= 0:
                    out[t, ch] += filters[ch, j] * seq[t - j, ch]
    return out


class TestMatmul:
    def test_identity(self):
        m = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        assert torch.equal(mathops.matmul(torch.eye(2), m), m)

    def test_zero_row(self):
        out = mathops.matmul(torch.tensor([[1.0, 0.0], [0.0, 0.0]]), torch.tensor([[0.0], [5.0]]))
        assert torch.equal(out, torch.zeros(2, 1))

    def test_matches_triple_loop_bitwise(self, gen):
        a, b = torch.randn(3, 4, generator=gen), torch.randn(4, 2, generator=gen)
        assert torch.equal(mathops.matmul(a, b), triple_loop(a, b))

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            mathops.matmul(torch.zeros(2, 3), torch.zeros(2, 3))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 999))
    def test_associative(self, n, k, m, p, seed):
        g = torch.Generator().manual_seed(seed)
        a, b, c = torch.randn(n, k, generator=g), torch.randn(k, m, generator=g), torch.randn(m, p, generator=g)
        left = mathops.matmul(mathops.matmul(a, b), c)
        right = mathops.matmul(a, mathops.matmul(b, c))
        assert (left - right).norm() <= 1e-9 * max(left.norm().item(), 1e-300)


class TestSoftmax:
    def test_symmetric(self):
        assert torch.allclose(mathops.softmax_rows(torch.zeros(1, 2)), torch.full((1, 2), 0.5), atol=0)

    def test_shift_invariance_large(self):
        out = mathops.softmax_rows(torch.full((1, 3), 1000.0))
        assert torch.allclose(out, torch.full((1, 3), 1 / 3), atol=1e-15)

    def test_closed_form(self):
        out = mathops.softmax_rows(torch.tensor([[0.0, math.log(3)]]))
        assert torch.allclose(out, torch.tensor([[0.25, 0.75]]), atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_rows_are_distributions(self, row):
        out = mathops.softmax_rows(torch.tensor([row]))
        assert ((out > 0) & (out <= 1)).all()
        assert abs(out.sum().item() - 1) <= 1e-12


class TestActivations:
    def test_silu_zero(self):
        assert mathops.silu(torch.tensor(0.0)).item() == 0.0

    def test_silu_odd_part(self):
        x = torch.tensor(1.0)
        sig = 1 / (1 + math.exp(-1.0))
        expected = 1.0 * (2 * sig - 1)
        assert abs((mathops.silu(x) + mathops.silu(-x)).item() - expected) < 1e-15

    def test_silu_asymptote(self):
        assert abs(mathops.silu(torch.tensor(20.0)).item() / 20 - 1) < 1e-6

    def test_silu_grad_matches_autograd(self, gen):
        x = torch.randn(10, generator=gen, requires_grad=True)
        (g,) = torch.autograd.grad(mathops.silu(x).sum(), x)
        assert torch.allclose(mathops.silu_grad(x.detach()), g, atol=1e-14)


class TestL2Normalize:
    def test_345(self):
        assert torch.allclose(mathops.l2_normalize_rows(torch.tensor([[3.0, 4.0]])), torch.tensor([[0.6, 0.8]]))

    def test_zero_row(self):
        assert torch.equal(mathops.l2_normalize_rows(torch.zeros(1, 2)), torch.zeros(1, 2))

    def test_scale_invariance(self, gen):
        r = torch.randn(1, 5, generator=gen)
        diff = mathops.l2_normalize_rows(7 * r) - mathops.l2_normalize_rows(r)
        assert diff.abs().max() <= 1e-12

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ValueError):
            mathops.l2_normalize_rows(torch.ones(1, 2), eps=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 999))
    def test_unit_and_idempotent(self, n, d, seed):
        m = torch.randn(n, d, generator=torch.Generator().manual_seed(seed))
        once = mathops.l2_normalize_rows(m)
        assert (once.norm(dim=-1) - 1).abs().max() <= 1e-12
        assert (mathops.l2_normalize_rows(once) - once).abs().max() <= 1e-12


class TestConv:
    def test_delta_is_identity(self, gen):
        seq = torch.randn(6, 3, generator=gen)
        assert torch.equal(mathops.causal_depthwise_conv1d(seq, mathops.delta_filters(3, 4), 4), seq)

    def test_shift_filter(self, gen):
        seq = torch.randn(6, 2, generator=gen)
        f = torch.zeros(2, 4)
        f[:, 1] = 1
        out = mathops.causal_depthwise_conv1d(seq, f, 4)
        assert torch.equal(out[0], torch.zeros(2))
        assert torch.equal(out[1:], seq[:-1])

    def test_matches_double_loop(self, gen):
        seq, f = torch.randn(6, 2, generator=gen), torch.randn(2, 4, generator=gen)
        assert (mathops.causal_depthwise_conv1d(seq, f, 4) - conv_loop(seq, f)).abs().max() <= 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            mathops.causal_depthwise_conv1d(torch.zeros(4, 3), torch.zeros(2, 4))

    def test_causal(self, gen):
        seq, f = torch.randn(8, 3, generator=gen), torch.randn(3, 4, generator=gen)
        base = mathops.causal_depthwise_conv1d(seq, f)
        bumped = seq.clone()
        bumped[5:] += 1.0
        out = mathops.causal_depthwise_conv1d(bumped, f)
        assert torch.equal(out[:5], base[:5])

    def test_history_continues_stream(self, gen):
        seq, f = torch.randn(9, 2, generator=gen), torch.randn(2, 4, generator=gen)
        full = mathops.causal_depthwise_conv1d(seq, f)
        tail = mathops.causal_depthwise_conv1d(seq[5:], f, history=seq[2:5])
        assert (tail - full[5:]).abs().max() <= 1e-15


class TestInit:
    def test_zeros(self):
        assert torch.equal(mathops.init_matrix(2, 2, "zeros"), torch.zeros(2, 2))

    def test_deterministic(self):
        assert torch.equal(mathops.init_matrix(5, 3, seed=9), mathops.init_matrix(5, 3, seed=9))

    def test_bounds_and_mean(self):
        m = mathops.init_matrix(100, 100, seed=3)
        bound = math.sqrt(6 / 200)
        assert m.abs().max() <= bound
        # U(-b, b) has standard deviation b / sqrt(3)
        se = bound / math.sqrt(3) / math.sqrt(m.numel())
        assert abs(m.mean().item()) < 3 * se


def test_tensor_record_roundtrip(gen):
    t = torch.randn(2, 3, 4, generator=gen)
    buf = io.BytesIO()
    mathops.write_tensor(buf, "w", t)
    buf.seek(0)
    name, back = mathops.read_tensor(buf)
    assert name == "w" and torch.equal(back, t)
