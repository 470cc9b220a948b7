"""Chunk-parallel inner loop.

Inside a chunk every token's gradient is taken at the chunk-start weights
``M0``, so all gradients are available at once. With ``u_j`` the gradient of
token ``j``, the recurrences

    S_t = eta_t S_{t-1} - theta_t u_t
    M_t = (1 - alpha_t) M_{t-1} + S_t

unroll to

    M_t = beta_t M0 + (D A)_t S0 + sum_j (D C)[t, j] u_j

where ``beta_t`` is the running product of ``1 - alpha``, ``D[t, i] =
beta_t / beta_i``, ``A_t`` the running product of ``eta`` and ``C[t, j]`` the
coefficient of ``u_j`` in ``S_t`` (from :func:`momentum_scan`). Each ``u_j``
is a rank-1 outer product per layer, so reads at every position reduce to
batched matmuls and per-token weights are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from titans import mathops
from titans.errors import ContractError
from titans.memory import (
    GateSignals,
    MemoryState,
    ProjectionSet,
    compute_gates,
    featurize,
    grad_factors,
    loss_grad,
)


@dataclass(frozen=True)
class ChunkPlan:
    """Partition of ``[0, n)`` into chunks of at most ``b`` tokens.

    ``offset`` is the absolute position of token 0 modulo ``b``; a nonzero
    offset shortens the first chunk so chunk starts stay on multiples of ``b``.
    """

    n: int
    b: int
    bounds: tuple[tuple[int, int], ...]
    offset: int = 0

    def __len__(self) -> int:
        return len(self.bounds)

    def chunk_start(self, t: int) -> int:
        """Index of the first token of the chunk holding token ``t``."""
        absolute = t + self.offset
        return max(absolute - absolute % self.b - self.offset, 0)


def make_chunk_plan(n: int, b: int, offset: int = 0) -> ChunkPlan:
    if b < 1:
        raise ContractError(f"chunk size must be >= 1, got {b}")
    if n < 0:
        raise ContractError(f"sequence length must be >= 0, got {n}")
    offset %= b
    bounds = []
    start = 0
    first = b - offset
    while start < n:
        stop = min(start + (first if not bounds else b), n)
        bounds.append((start, stop))
        start = stop
    return ChunkPlan(n, b, tuple(bounds), offset)


@dataclass
class DecayProducts:
    """Weight-decay bookkeeping for one chunk.

    ``ratios[t, i]`` is ``beta_t / beta_i`` for ``i <= t`` (zero above the
    diagonal), computed as a product over ``(i, t]`` so no division occurs.
    """

    beta: torch.Tensor
    theta: torch.Tensor
    bratio: torch.Tensor
    ratios: torch.Tensor

    @property
    def Theta(self) -> torch.Tensor:
        return torch.diag_embed(self.theta)


def _interval_products(factors: torch.Tensor) -> torch.Tensor:
    """``P[t, i] = prod_{i < l <= t} factors[l]`` for ``i <= t``, else 0."""
    n = factors.shape[-1]
    lower = torch.ones(n, n, dtype=torch.bool).tril(-1)  # l > i
    grid = torch.where(lower, factors.unsqueeze(-1), torch.ones_like(factors).unsqueeze(-1))
    prods = torch.cumprod(grid, dim=-2)
    return prods * torch.ones(n, n, dtype=factors.dtype).tril()


def chunk_decay(alpha: torch.Tensor, theta: torch.Tensor) -> DecayProducts:
    keep = 1 - alpha
    beta = torch.cumprod(keep, dim=-1)
    ratios = _interval_products(keep)
    return DecayProducts(beta, theta, ratios[..., -1, :], ratios)


def decay_products(alphas: torch.Tensor, thetas: torch.Tensor, plan: ChunkPlan) -> list[DecayProducts]:
    """One :class:`DecayProducts` per chunk; each uses only that chunk's gates."""
    if (alphas < 0).any() or (alphas > 1).any():
        raise ContractError("alpha must lie in [0, 1]")
    if (thetas < 0).any():
        raise ContractError("theta must be non-negative")
    return [chunk_decay(alphas[..., s:e], thetas[..., s:e]) for s, e in plan.bounds]


def linear_scan(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Inclusive scan of ``h_t = a_t h_{t-1} + b_t`` from ``h_0 = 0``.

    Elements ``(a, b)`` combine as ``(a2 a1, a2 b1 + b2)``; the log-depth
    (Hillis-Steele) schedule applies that combiner ``ceil(log2 n)`` times.

    Args:
        a: (..., n) transition coefficients.
        b: (..., n, *feature) inputs; leading dims broadcast with ``a``.

    Returns:
        ``(A, B)`` where ``A_t = a_t ... a_1`` and ``B_t = h_t``.
    """
    n = a.shape[-1]
    extra = b.dim() - a.dim()
    if extra < 0:
        raise ContractError("b must have the time axis plus feature dims")
    t_ax = a.dim() - 1
    b = b.expand(torch.broadcast_shapes(a.shape + (1,) * extra, b.shape))
    A, B = a, b
    step = 1
    while step < n:
        a_cur = A[..., step:]
        a_b = a_cur.reshape(a_cur.shape + (1,) * extra)
        tail = a_b * B.narrow(t_ax, 0, n - step) + B.narrow(t_ax, step, n - step)
        B = torch.cat([B.narrow(t_ax, 0, step), tail], dim=t_ax)
        A = torch.cat([A[..., :step], a_cur * A[..., : n - step]], dim=-1)
        step *= 2
    return A, B


@dataclass
class MomentumScanInput:
    u: torch.Tensor
    eta: torch.Tensor
    theta: torch.Tensor


def momentum_scan(inputs: MomentumScanInput, s_init: torch.Tensor) -> torch.Tensor:
    """All ``S_t = eta_t S_{t-1} - theta_t u_t`` via :func:`linear_scan`.

    ``u`` is (..., n, *shape) and ``s_init`` is (..., *shape).
    """
    extra = inputs.u.dim() - inputs.eta.dim()
    scale = inputs.theta.reshape(inputs.theta.shape + (1,) * extra)
    A, B = linear_scan(inputs.eta, -scale * inputs.u)
    return A.reshape(A.shape + (1,) * extra) * s_init.unsqueeze(inputs.eta.dim() - 1) + B


def chunk_grads(state: MemoryState, k: torch.Tensor, v: torch.Tensor) -> list[torch.Tensor]:
    """Per-token gradients of a chunk, all at the chunk-start weights.

    Returns one (..., n, d, d) tensor per layer.
    """
    return loss_grad(state, k, v)


def per_chunk_constant_gates(tokens: torch.Tensor, plan: ChunkPlan, proj: ProjectionSet) -> GateSignals:
    """Gates computed from each chunk's mean token, broadcast over the chunk."""
    parts = []
    for s, e in plan.bounds:
        mean = tokens[..., s:e, :].mean(dim=-2)
        g = compute_gates(mean, proj)
        parts.append(tuple(x.unsqueeze(-1).expand(x.shape + (e - s,)) for x in (g.alpha, g.theta, g.eta)))
    if not parts:
        empty = tokens.new_zeros(tokens.shape[:-1])
        return GateSignals(empty, empty.clone(), empty.clone())
    return GateSignals(*(torch.cat([p[i] for p in parts], dim=-1) for i in range(3)))


def chunk_step(
    state: MemoryState,
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    gates: GateSignals,
    detach_start: bool = False,
) -> tuple[MemoryState, torch.Tensor]:
    """Process one chunk; returns the end-of-chunk state and per-token reads."""
    n = k.shape[-2]
    decay = chunk_decay(gates.alpha, gates.theta)
    eye = torch.eye(n, dtype=k.dtype)
    # C[t, j]: coefficient of u_j in S_t
    mom_A, C = linear_scan(gates.eta, -gates.theta.unsqueeze(-2) * eye)
    D = decay.ratios
    DA = (D @ mom_A.unsqueeze(-1)).squeeze(-1)
    DC = D @ C
    start = [w.detach() for w in state.weights] if detach_start else state.weights
    factors = grad_factors(start, k, v)

    beta = decay.beta.unsqueeze(-1)
    DA_ = DA.unsqueeze(-1)
    last_DC = DC[..., -1, :].unsqueeze(-1)
    last_C = C[..., -1, :].unsqueeze(-1)
    beta_end = decay.beta[..., -1, None, None]
    DA_end = DA[..., -1, None, None]
    A_end = mom_A[..., -1, None, None]

    x = q
    weights, momentum = [], []
    L = len(state.weights)
    for i, (w, s) in enumerate(zip(state.weights, state.momentum)):
        delta, z = factors[i]
        h = beta * (x @ w.mT) + DA_ * (x @ s.mT) + (DC * (x @ z.mT)) @ delta
        x = mathops.silu(h) if i < L - 1 else h
        weights.append(beta_end * w + DA_end * s + delta.mT @ (last_DC * z))
        momentum.append(A_end * s + delta.mT @ (last_C * z))
    return MemoryState(weights, momentum), x


def run_chunked(
    state: MemoryState,
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    gates: GateSignals,
    plan: ChunkPlan,
    detach_start: bool = False,
) -> tuple[MemoryState, torch.Tensor]:
    if plan.n != k.shape[-2]:
        raise ContractError(f"plan covers {plan.n} tokens, sequence has {k.shape[-2]}")
    outputs = []
    for s, e in plan.bounds:
        state, out = chunk_step(state, q[..., s:e, :], k[..., s:e, :], v[..., s:e, :],
                                gates.window(s, e), detach_start)
        outputs.append(out)
    if not outputs:
        return state, q.new_zeros(q.shape)
    return state, torch.cat(outputs, dim=-2)


def chunked_update(
    state: MemoryState, tokens: torch.Tensor, proj: ProjectionSet, plan: ChunkPlan
) -> tuple[MemoryState, torch.Tensor]:
    if tokens.shape[-2] == 0:
        return state, tokens.new_zeros(tokens.shape)
    q, k, v, _ = featurize(tokens, proj)
    return run_chunked(state, q, k, v, compute_gates(tokens, proj), plan)
