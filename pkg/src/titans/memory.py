"""Neural long-term memory: an MLP whose weights are trained at test time.

Orientation: the memory maps column vectors, ``M(k) = W_L ... silu(W_1 k)``.
Tokens are stored as rows, so in code a read is ``k @ W.mT``. The linear
attention helpers below use the row convention ``y = q @ M`` instead; the
two are transposes of each other (``M_row = W.T``).

Weights may carry leading batch dimensions: ``(..., d, d)``. A query with
the same number of dims as the weights is a stack of rows read against one
weight set; a query with one fewer dim is one row per weight set.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import torch

from titans import mathops
from titans.errors import ContractError, NumericalError, ShapeError

STATE_MAGIC = b"TTNM"
STATE_VERSION = 1


@dataclass
class MemoryState:
    """Fast weights ``M_t`` and momentum ``S_t``, one momentum per weight."""

    weights: list[torch.Tensor]
    momentum: list[torch.Tensor]

    def __post_init__(self):
        if len(self.weights) < 1:
            raise ContractError("memory needs at least one layer")
        if len(self.weights) != len(self.momentum):
            raise ShapeError("weights and momentum must have the same length")
        for w, s in zip(self.weights, self.momentum):
            if w.shape != s.shape:
                raise ShapeError(f"momentum shape {tuple(s.shape)} != weight shape {tuple(w.shape)}")

    @classmethod
    def from_weights(cls, weights, batch_shape: tuple[int, ...] = ()) -> "MemoryState":
        ws = [w.expand(batch_shape + w.shape[-2:]) for w in weights]
        return cls(ws, [torch.zeros_like(w) for w in ws])

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[-1]

    def detach(self) -> "MemoryState":
        return MemoryState([w.detach() for w in self.weights], [s.detach() for s in self.momentum])

    def clone(self) -> "MemoryState":
        return MemoryState([w.clone() for w in self.weights], [s.clone() for s in self.momentum])

    def to_bytes(self) -> bytes:
        """Binary container: header then row-major weights, then momenta (LE f64)."""
        if self.weights[0].dim() != 2:
            raise ContractError("only unbatched states serialize; split the batch first")
        buf = io.BytesIO()
        buf.write(STATE_MAGIC)
        buf.write(struct.pack("<III", STATE_VERSION, self.depth, self.dim))
        for t in self.weights + self.momentum:
            buf.write(t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, dtype: torch.dtype = torch.float64) -> "MemoryState":
        if raw[:4] != STATE_MAGIC:
            raise ValueError("not a memory state container")
        version, depth, dim = struct.unpack("<III", raw[4:16])
        if version != STATE_VERSION:
            raise ValueError(f"unsupported state version {version}")
        expected = 16 + 2 * depth * dim * dim * 8
        if len(raw) != expected:
            raise ValueError(f"state container has {len(raw)} bytes, expected {expected}")
        flat = torch.frombuffer(bytearray(raw[16:]), dtype=torch.float64)
        mats = [m.reshape(dim, dim).clone().to(dtype) for m in flat.split(dim * dim)]
        return cls(mats[:depth], mats[depth:])


@dataclass
class GateSignals:
    """Per-token forget rate ``alpha``, inner step ``theta`` and momentum decay ``eta``.

    Each field has shape ``(..., N)`` for a sequence, or ``(...)`` for one token.
    """

    alpha: torch.Tensor
    theta: torch.Tensor
    eta: torch.Tensor

    def at(self, t: int) -> "GateSignals":
        return GateSignals(self.alpha[..., t], self.theta[..., t], self.eta[..., t])

    def window(self, start: int, stop: int) -> "GateSignals":
        return GateSignals(
            self.alpha[..., start:stop], self.theta[..., start:stop], self.eta[..., start:stop]
        )

    def __len__(self) -> int:
        return self.alpha.shape[-1]


@dataclass
class ProjectionSet:
    """Slow (outer-loop) parameters that turn tokens into keys, values, queries and gates.

    ``gate_w`` columns are the alpha, eta and theta logits, in that order.
    """

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    gate_w: torch.Tensor
    gate_b: torch.Tensor
    conv_q: torch.Tensor | None = None
    conv_k: torch.Tensor | None = None
    conv_v: torch.Tensor | None = None
    activation: bool = False
    theta_max: float = 1.0
    theta_squash: str = "sigmoid"
    use_momentum: bool = True
    use_decay: bool = True

    @classmethod
    def identity(cls, dim: int, dtype: torch.dtype = torch.float64, **kw) -> "ProjectionSet":
        eye = torch.eye(dim, dtype=dtype)
        return cls(eye, eye.clone(), eye.clone(), torch.zeros(dim, 3, dtype=dtype),
                   torch.zeros(3, dtype=dtype), **kw)

    @property
    def conv_kernel(self) -> int:
        return 0 if self.conv_k is None else self.conv_k.shape[-1]


def project_kv(x_t: torch.Tensor, proj: ProjectionSet) -> tuple[torch.Tensor, torch.Tensor]:
    """Key (unit-norm) and value for bare token rows."""
    if x_t.shape[-1] != proj.w_k.shape[0]:
        raise ShapeError(f"token width {x_t.shape[-1]} != projection width {proj.w_k.shape[0]}")
    k = mathops.l2_normalize_rows(x_t @ proj.w_k)
    v = x_t @ proj.w_v
    return k, v


def featurize(
    x: torch.Tensor, proj: ProjectionSet, history: dict | None = None
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, dict]:
    """Sequence-level queries, keys and values.

    projection -> optional causal conv -> optional silu -> l2-norm (q, k only).
    ``history`` holds the last ``kernel - 1`` pre-conv rows of each stream from
    a previous call; the updated history is returned.
    """
    if x.shape[-1] != proj.w_q.shape[0]:
        raise ShapeError(f"token width {x.shape[-1]} != projection width {proj.w_q.shape[0]}")
    history = history or {}
    new_history = {}
    feats = []
    for name, w, conv in (("q", proj.w_q, proj.conv_q), ("k", proj.w_k, proj.conv_k),
                          ("v", proj.w_v, proj.conv_v)):
        z = x @ w
        if conv is not None:
            keep = conv.shape[-1] - 1
            prev = history.get(name)
            if prev is None:
                prev = z.new_zeros(z.shape[:-2] + (keep, z.shape[-1]))
            prev = prev.expand(z.shape[:-2] + prev.shape[-2:])
            full = torch.cat([prev, z], dim=-2)
            new_history[name] = full[..., full.shape[-2] - keep:, :]
            z = mathops.causal_depthwise_conv1d(z, conv, history=prev)
        if proj.activation:
            z = mathops.silu(z)
        feats.append(z)
    q, k, v = feats
    return mathops.l2_normalize_rows(q), mathops.l2_normalize_rows(k), v, new_history


def compute_gates(x: torch.Tensor, proj: ProjectionSet) -> GateSignals:
    """Data-dependent gates from token rows ``x`` of shape (..., d) or (..., N, d)."""
    logits = x @ proj.gate_w + proj.gate_b
    alpha = mathops.sigmoid(logits[..., 0])
    eta = mathops.sigmoid(logits[..., 1])
    if proj.theta_squash == "sigmoid":
        theta = proj.theta_max * mathops.sigmoid(logits[..., 2])
    elif proj.theta_squash == "softplus":
        theta = proj.theta_max * mathops.softplus(logits[..., 2])
    else:
        raise ContractError(f"unknown theta squash {proj.theta_squash!r}")
    if not proj.use_decay:
        alpha = torch.zeros_like(alpha)
    if not proj.use_momentum:
        eta = torch.zeros_like(eta)
    return GateSignals(alpha, theta, eta)


# --- forward / backward of the memory MLP ----------------------------------

def _apply(w: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if x.dim() == w.dim():
        return x @ w.mT
    return (w @ x.unsqueeze(-1)).squeeze(-1)


def _apply_t(w: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    # d @ W, i.e. W^T applied to column d
    if d.dim() == w.dim():
        return d @ w
    return (d.unsqueeze(-2) @ w).squeeze(-2)


def mlp_forward(weights: list[torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    for i, w in enumerate(weights):
        x = _apply(w, x)
        if i < len(weights) - 1:
            x = mathops.silu(x)
    return x


def grad_factors(
    weights: list[torch.Tensor], k: torch.Tensor, v: torch.Tensor
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Rank-1 factors of the per-token gradient of ``0.5 * ||M(k) - v||^2``.

    Returns ``[(delta_l, z_l), ...]`` with ``grad W_l = delta_l z_l^T`` per token.
    """
    zs = [k]
    hs = []
    x = k
    for i, w in enumerate(weights):
        h = _apply(w, x)
        hs.append(h)
        x = mathops.silu(h) if i < len(weights) - 1 else h
        if i < len(weights) - 1:
            zs.append(x)
    delta = x - v
    factors = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        factors[i] = (delta, zs[i])
        if i > 0:
            delta = _apply_t(weights[i], delta) * mathops.silu_grad(hs[i - 1])
    return factors


def _outer(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a.unsqueeze(-1) * b.unsqueeze(-2)


def assoc_loss(state: MemoryState, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    err = mlp_forward(state.weights, k) - v
    return 0.5 * (err * err).sum(-1)


def loss_grad(state: MemoryState, k: torch.Tensor, v: torch.Tensor) -> list[torch.Tensor]:
    """Analytic gradient of :func:`assoc_loss` for each weight matrix.

    With one layer this is ``(W k - v) k^T``.
    """
    return [_outer(d, z) for d, z in grad_factors(state.weights, k, v)]


def tape_assoc_loss(tape, weights: list, k, v):
    """:func:`assoc_loss` recorded on an autodiff tape; ``k`` and ``v`` are (1, d) nodes."""
    x = k
    for i, w in enumerate(weights):
        x = tape("matmul", x, tape("transpose", w))
        if i < len(weights) - 1:
            x = tape("silu", x)
    err = tape("sub", x, v)
    return tape("scale", tape("sum", tape("square", err)), 0.5)


def retrieve(state: MemoryState, q: torch.Tensor) -> torch.Tensor:
    """Forward pass without any weight update."""
    return mlp_forward(state.weights, q)


def _as_gate(x, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=like.dtype)
    return t[..., None, None]


def check_gates(gates: GateSignals) -> None:
    a, th, e = (torch.as_tensor(g) for g in (gates.alpha, gates.theta, gates.eta))
    if (a < 0).any() or (a > 1).any():
        raise ContractError("alpha must lie in [0, 1]")
    if (e < 0).any() or (e > 1).any():
        raise ContractError("eta must lie in [0, 1]")
    if (th < 0).any():
        raise ContractError("theta must be non-negative")


def surprise_step(
    state: MemoryState,
    k: torch.Tensor,
    v: torch.Tensor,
    gates: GateSignals,
    index: int | None = None,
    check: bool = True,
) -> MemoryState:
    """One inner-loop step with momentum and forgetting.

    ``S_t = eta S_{t-1} - theta grad``; ``M_t = (1 - alpha) M_{t-1} + S_t``.
    The input state is left untouched.
    """
    if check:
        check_gates(gates)
    grads = loss_grad(state, k, v)
    like = state.weights[0]
    alpha, theta, eta = (_as_gate(g, like) for g in (gates.alpha, gates.theta, gates.eta))
    weights, momentum = [], []
    for w, s, g in zip(state.weights, state.momentum, grads):
        if check and not torch.isfinite(g).all():
            raise NumericalError("non-finite memory gradient", index)
        s_new = eta * s - theta * g
        momentum.append(s_new)
        weights.append((1 - alpha) * w + s_new)
    return MemoryState(weights, momentum)


def run_sequential(
    state: MemoryState,
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    gates: GateSignals,
    start_index: int = 0,
    check: bool = True,
) -> tuple[MemoryState, torch.Tensor]:
    """Token-by-token update; each output reads the memory after its own write."""
    outputs = []
    for t in range(k.shape[-2]):
        state = surprise_step(state, k[..., t, :], v[..., t, :], gates.at(t),
                              index=start_index + t, check=check)
        outputs.append(retrieve(state, q[..., t, :]))
    if not outputs:
        return state, q.new_zeros(q.shape)
    return state, torch.stack(outputs, dim=-2)


def sequential_update(
    state: MemoryState, tokens: torch.Tensor, proj: ProjectionSet
) -> tuple[MemoryState, torch.Tensor]:
    if tokens.shape[-2] == 0:
        return state, tokens.new_zeros(tokens.shape)
    q, k, v, _ = featurize(tokens, proj)
    return run_sequential(state, q, k, v, compute_gates(tokens, proj))


# --- linear fast-weight rules (matrix memory, retrieval S @ k) -------------

def delta_rule_step(S: torch.Tensor, k: torch.Tensor, v: torch.Tensor, theta) -> torch.Tensor:
    """``S (I - theta k k^T) + theta v k^T``."""
    eye = torch.eye(S.shape[-1], dtype=S.dtype)
    return S @ (eye - theta * _outer(k, k)) + theta * _outer(v, k)


def gated_delta_rule_step(S, k, v, theta, alpha) -> torch.Tensor:
    """``S ((1 - alpha) I - theta k k^T) + theta v k^T``: forget, then correct."""
    a = torch.as_tensor(alpha)
    if (a < 0).any() or (a > 1).any():
        raise ContractError("alpha must lie in [0, 1]")
    eye = torch.eye(S.shape[-1], dtype=S.dtype)
    return S @ ((1 - alpha) * eye - theta * _outer(k, k)) + theta * _outer(v, k)


def longhorn_step(S, k, v, theta) -> torch.Tensor:
    """Implicit online step with ``delta = theta / (1 + theta k^T k)``."""
    delta = theta / (1 + theta * (k * k).sum(-1))
    eye = torch.eye(S.shape[-1], dtype=S.dtype)
    return S @ (eye - delta * _outer(k, k)) + delta * _outer(v, k)


def linear_attention_step(M: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Additive write ``M + k^T v`` (row convention, read with ``q @ M``)."""
    return M + _outer(k, v)


def linear_attention_read(M: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return (q.unsqueeze(-2) @ M).squeeze(-2)
