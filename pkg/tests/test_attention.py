from __future__ import annotations

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from titans.attention import (
    attention_weights,
    build_mac_mask,
    causal_attention,
    causal_mask,
    kernel_linear_attention,
    masked_attention,
    prepend_persistent,
    recurrent_linear_attention,
    sliding_window_attention,
    stream_window_mask,
    window_mask,
)
from titans.errors import ContractError, ShapeError


def loop_attention(q, k, v, allowed):
    """Double loop with an explicit max-shifted exponent."""
    n, m = q.shape[0], k.shape[0]
    out = torch.zeros(n, v.shape[1])
    for i in range(n):
        cols = [j for j in range(m) if allowed(i, j)]
        scores = [sum(q[i, c].item() * k[j, c].item() for c in range(q.shape[1])) / math.sqrt(q.shape[1])
                  for j in cols]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        total = sum(ex)
        for w, j in zip(ex, cols):
            out[i] += (w / total) * v[j]
    return out


def weights(gen, d, e=None):
    return [torch.randn(d, e or d, generator=gen) / math.sqrt(d) for _ in range(3)]


class TestMasks:
    def test_causal(self):
        assert torch.equal(causal_mask(3), torch.tensor([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=torch.bool))

    def test_window(self):
        m = window_mask(4, 2)
        assert m[3].tolist() == [False, False, True, True]
        assert m[0].tolist() == [True, False, False, False]

    def test_window_with_prefix(self):
        m = window_mask(3, 1, n_prefix=2)
        assert m[2].tolist() == [True, True, True, False, False]
        assert m[4].tolist() == [True, True, False, False, True]
        assert m[0].tolist() == [True, False, False, False, False]

    def test_window_at_least_n_is_causal(self):
        assert torch.equal(window_mask(5, 9), causal_mask(5))

    def test_bad_window(self):
        with pytest.raises(ContractError):
            window_mask(3, 0)

    def test_stream_without_cache_matches(self):
        assert torch.equal(stream_window_mask(4, 0, 2, 3), window_mask(4, 2, 3)[3:])

    def test_stream_with_cache(self):
        full = window_mask(6, 3, 1)
        part = stream_window_mask(2, 4, 3, 1)
        assert torch.equal(part, full[5:])

    def test_mac_full(self):
        m = build_mac_mask(1, 2, 3)
        assert m[:, :3].all()
        assert torch.equal(m[3:, 3:], causal_mask(3))
        assert not m[:3, 3:].any()

    def test_mac_causal_slots(self):
        m = build_mac_mask(1, 3, 3, slot_access="causal")
        assert m[4, 1:4].tolist() == [True, False, False]
        assert m[5, 1:4].tolist() == [True, True, False]

    def test_mac_unknown_access(self):
        with pytest.raises(ContractError):
            build_mac_mask(1, 1, 1, slot_access="some")


class TestSoftmaxAttention:
    @pytest.mark.parametrize("n,d", [(1, 2), (5, 3), (7, 4)])
    def test_causal_matches_loop(self, n, d, gen):
        x = torch.randn(n, d, generator=gen)
        wq, wk, wv = weights(gen, d)
        got = causal_attention(x, wq, wk, wv)
        ref = loop_attention(x @ wq, x @ wk, x @ wv, lambda i, j: j <= i)
        assert (got - ref).abs().max() <= 1e-12

    def test_window_matches_loop(self, gen):
        x, p = torch.randn(9, 4, generator=gen), torch.randn(2, 4, generator=gen)
        wq, wk, wv = weights(gen, 4)
        got = sliding_window_attention(x, wq, wk, wv, 3, prefix=p)
        full = torch.cat([p, x])
        ref = loop_attention(full @ wq, full @ wk, full @ wv, lambda i, j: j < 2 or (j <= i and j > i - 3))[2:]
        assert (got - ref).abs().max() <= 1e-12

    def test_single_token_copies_value(self, gen):
        x = torch.randn(1, 3, generator=gen)
        wq, wk, wv = weights(gen, 3)
        assert (causal_attention(x, wq, wk, wv) - x @ wv).abs().max() <= 1e-15

    def test_rows_stochastic(self, gen):
        q, k = torch.randn(5, 3, generator=gen), torch.randn(5, 3, generator=gen)
        w = attention_weights(q, k, window_mask(5, 2))
        assert (w.sum(-1) - 1).abs().max() <= 1e-14
        assert (w[~window_mask(5, 2)] == 0).all()

    def test_equal_scores_average(self):
        q, k = torch.zeros(2, 2), torch.zeros(2, 2)
        v = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        out = masked_attention(q, k, v, causal_mask(2))
        assert torch.equal(out[1], torch.tensor([0.5, 0.5]))

    def test_heads_match_manual_split(self, gen):
        q, k, v = (torch.randn(6, 4, generator=gen) for _ in range(3))
        mask = causal_mask(6)
        got = masked_attention(q, k, v, mask, heads=2)
        parts = [masked_attention(q[:, s], k[:, s], v[:, s], mask) for s in (slice(0, 2), slice(2, 4))]
        assert (got - torch.cat(parts, dim=1)).abs().max() <= 1e-14

    def test_mask_shape_error(self, gen):
        q = torch.randn(3, 2, generator=gen)
        with pytest.raises(ShapeError):
            attention_weights(q, q, causal_mask(4))

    def test_empty_row_rejected(self, gen):
        q = torch.randn(2, 2, generator=gen)
        with pytest.raises(ContractError):
            attention_weights(q, q, torch.tensor([[True, False], [False, False]]))

    def test_heads_must_divide(self, gen):
        q = torch.randn(2, 3, generator=gen)
        with pytest.raises(ShapeError):
            masked_attention(q, q, q, causal_mask(2), heads=2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 10_000))
    def test_future_perturbation(self, n, w, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(n, 3, generator=g)
        wq, wk, wv = weights(g, 3)
        cut = int(torch.randint(1, n, (1,), generator=g))
        y = x.clone()
        y[cut:] = torch.randn(n - cut, 3, generator=g)
        a = sliding_window_attention(x, wq, wk, wv, w)
        b = sliding_window_attention(y, wq, wk, wv, w)
        assert torch.equal(a[:cut], b[:cut])

    def test_window_locality(self, gen):
        x = torch.randn(8, 3, generator=gen)
        wq, wk, wv = weights(gen, 3)
        y = x.clone()
        y[0] = torch.randn(3, generator=gen)
        a, b = sliding_window_attention(x, wq, wk, wv, 3), sliding_window_attention(y, wq, wk, wv, 3)
        assert torch.equal(a[3:], b[3:]) and not torch.equal(a[:3], b[:3])

    def test_batched(self, gen):
        x = torch.randn(2, 5, 3, generator=gen)
        wq, wk, wv = weights(gen, 3)
        out = causal_attention(x, wq, wk, wv)
        assert (out[1] - causal_attention(x[1], wq, wk, wv)).abs().max() <= 1e-14


class TestPersistent:
    def test_prepend(self, gen):
        x, p = torch.randn(2, 3, 4, generator=gen), torch.randn(2, 4, generator=gen)
        out = prepend_persistent(x, p)
        assert out.shape == (2, 5, 4) and torch.equal(out[1, :2], p)

    def test_empty_prefix(self, gen):
        x = torch.randn(3, 4, generator=gen)
        assert prepend_persistent(x, None) is x and prepend_persistent(x, torch.zeros(0, 4)) is x

    def test_width_mismatch(self, gen):
        with pytest.raises(ShapeError):
            prepend_persistent(torch.randn(3, 4, generator=gen), torch.randn(1, 3, generator=gen))


class TestLinearAttention:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 6), st.integers(0, 10_000))
    def test_recurrent_equals_quadratic(self, n, d, seed):
        g = torch.Generator().manual_seed(seed)
        # positive features keep the normalizer away from zero
        x = torch.rand(n, d, generator=g) + 0.1
        wq, wk, wv = (torch.rand(d, d, generator=g) + 0.1 for _ in range(3))
        ref = kernel_linear_attention(x, wq, wk, wv)
        got = recurrent_linear_attention(x, wq, wk, wv)
        assert (ref - got).abs().max() <= 1e-10

    def test_loop_oracle(self, gen):
        x = torch.rand(4, 2, generator=gen) + 0.1
        eye = torch.eye(2)
        out = kernel_linear_attention(x, eye, eye, eye)
        i = 3
        num = sum((x[i] @ x[j]) * x[j] for j in range(i + 1))
        den = sum(x[i] @ x[j] for j in range(i + 1))
        assert (out[i] - num / den).abs().max() <= 1e-14

    def test_zero_normalizer(self):
        x = torch.zeros(2, 2)
        eye = torch.eye(2)
        with pytest.raises(ContractError):
            kernel_linear_attention(x, eye, eye, eye)
        with pytest.raises(ContractError):
            recurrent_linear_attention(x, eye, eye, eye)
