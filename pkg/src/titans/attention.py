"""Softmax attention under boolean masks, plus a linear-attention reference.

Masks are boolean tensors where ``True`` means "may attend". Rows index
queries and columns index keys, both over the full (prefixed) sequence.
"""

from __future__ import annotations

import math

import torch

from titans import mathops
from titans.errors import ContractError, ShapeError
from titans.memory import linear_attention_read, linear_attention_step

MASK_FILL = -1e30


# --- masks -----------------------------------------------------------------

def causal_mask(n: int, n_prefix: int = 0) -> torch.Tensor:
    """Lower-triangular mask over ``n_prefix + n`` positions."""
    total = n_prefix + n
    return torch.ones(total, total, dtype=torch.bool).tril()


def window_mask(n: int, window: int, n_prefix: int = 0) -> torch.Tensor:
    """Causal sliding window of ``window`` real tokens plus an always-visible prefix.

    Row ``i`` (real token) sees real tokens ``j`` with ``i - window < j <= i``
    and every prefix column. Prefix rows see the prefix causally.
    """
    if window < 1:
        raise ContractError(f"window must be >= 1, got {window}")
    total = n_prefix + n
    idx = torch.arange(total)
    rows, cols = idx[:, None], idx[None, :]
    mask = (cols <= rows) & (cols > rows - window)
    mask[n_prefix:, :n_prefix] = True
    return mask


def stream_window_mask(n: int, n_cache: int, window: int, n_prefix: int = 0) -> torch.Tensor:
    """Rows for ``n`` new queries over ``[prefix | cache | new]`` keys.

    ``n_cache`` earlier real tokens precede the new ones. With no cache this
    equals the real-token rows of :func:`window_mask`.
    """
    if window < 1:
        raise ContractError(f"window must be >= 1, got {window}")
    rows = torch.arange(n)[:, None] + n_cache
    cols = torch.arange(n_cache + n)[None, :]
    real = (cols <= rows) & (cols > rows - window)
    return torch.cat([torch.ones(n, n_prefix, dtype=torch.bool), real], dim=1)


def build_mac_mask(n_p: int, n_l: int, c: int, slot_access: str = "full") -> torch.Tensor:
    """Mask over ``[persistent | memory slots | segment]``.

    Every row sees the persistent and slot columns; segment rows additionally
    see the segment causally. With ``slot_access="causal"`` segment row ``i``
    only sees slots ``j <= i`` (slot ``j`` is the memory read for token ``j``).
    """
    if min(n_p, n_l, c) < 0:
        raise ContractError("mask sizes must be non-negative")
    head = n_p + n_l
    total = head + c
    mask = torch.zeros(total, total, dtype=torch.bool)
    mask[:, :head] = True
    mask[head:, head:] = torch.ones(c, c, dtype=torch.bool).tril()
    if slot_access == "causal":
        mask[head:, n_p:head] = torch.ones(c, n_l, dtype=torch.bool).tril()
    elif slot_access != "full":
        raise ContractError(f"unknown slot access {slot_access!r}")
    return mask


def prepend_persistent(x: torch.Tensor, p: torch.Tensor | None) -> torch.Tensor:
    """``[P ; x]`` along the sequence axis; ``P`` is shared over the batch."""
    if p is None or p.shape[-2] == 0:
        return x
    if p.shape[-1] != x.shape[-1]:
        raise ShapeError(f"persistent width {p.shape[-1]} != token width {x.shape[-1]}")
    return torch.cat([p.expand(x.shape[:-2] + p.shape[-2:]), x], dim=-2)


# --- softmax attention -----------------------------------------------------

def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    return x.reshape(*lead, n, heads, d // heads).transpose(-2, -3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    x = x.transpose(-2, -3)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def attention_weights(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row-stochastic weights ``softmax(q k^T / sqrt(d) + mask_bias)``."""
    n, m = q.shape[-2], k.shape[-2]
    if mask.shape[-2:] != (n, m):
        raise ShapeError(f"mask {tuple(mask.shape)} does not match {n}x{m} logits")
    if not mask.any(dim=-1).all():
        raise ContractError("a query row has no attendable positions")
    logits = (q @ k.mT) / math.sqrt(q.shape[-1])
    bias = torch.zeros(mask.shape, dtype=q.dtype).masked_fill(~mask, MASK_FILL)
    return mathops.softmax_rows(logits + bias)


def masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor, heads: int = 1
) -> torch.Tensor:
    """Attention on already-projected streams, optionally split into heads."""
    if heads == 1:
        return attention_weights(q, k, mask) @ v
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    return _merge_heads(attention_weights(qh, kh, mask) @ vh)


def causal_attention(x, w_q, w_k, w_v, mask: torch.Tensor | None = None, heads: int = 1) -> torch.Tensor:
    """Softmax attention of ``x`` over itself; ``mask`` defaults to causal."""
    if mask is None:
        mask = causal_mask(x.shape[-2])
    return masked_attention(x @ w_q, x @ w_k, x @ w_v, mask, heads)


def sliding_window_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    window: int,
    prefix: torch.Tensor | None = None,
    heads: int = 1,
) -> torch.Tensor:
    """Windowed causal attention over ``[prefix ; x]``; prefix rows are dropped."""
    n_p = 0 if prefix is None else prefix.shape[-2]
    full = prepend_persistent(x, prefix)
    out = causal_attention(full, w_q, w_k, w_v, window_mask(x.shape[-2], window, n_p), heads)
    return out[..., n_p:, :]


# --- linear attention ------------------------------------------------------

def kernel_linear_attention(x, w_q, w_k, w_v) -> torch.Tensor:
    """Normalized linear attention with identity feature map (quadratic form).

    ``y_i = sum_{j<=i} (q_i . k_j) v_j / sum_{j<=i} (q_i . k_j)``.
    """
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    scores = (q @ k.mT) * causal_mask(x.shape[-2]).to(q.dtype)
    norm = scores.sum(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ContractError("linear attention normalizer is zero")
    return (scores @ v) / norm


def recurrent_linear_attention(x, w_q, w_k, w_v) -> torch.Tensor:
    """Same map as :func:`kernel_linear_attention`, as a running accumulator.

    ``M_i = M_{i-1} + k_i^T v_i`` and ``z_i = z_{i-1} + k_i``; ``y_i = q_i M_i / (q_i . z_i)``.
    """
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    mem = q.new_zeros(q.shape[:-2] + (k.shape[-1], v.shape[-1]))
    z = q.new_zeros(q.shape[:-2] + (k.shape[-1],))
    outs = []
    for t in range(x.shape[-2]):
        mem = linear_attention_step(mem, k[..., t, :], v[..., t, :])
        z = z + k[..., t, :]
        norm = (q[..., t, :] * z).sum(-1, keepdim=True)
        if (norm == 0).any():
            raise ContractError(f"linear attention normalizer is zero at position {t}")
        outs.append(linear_attention_read(mem, q[..., t, :]) / norm)
    return torch.stack(outs, dim=-2)
