"""Titans language models: MAC, MAG, MAL and the memory-only LMM stack.

A model is ``embed -> blocks -> unembed`` where every block is

    xn = rms_norm(x)
    core = variant(xn)
    x = x + (rms_norm(core) * silu(xn W_gate)) W_out

and ``unembed(h) = rms_norm(h) E^T`` with ``E`` the (tied) embedding table.
There is no positional encoding; the causal convolutions in the memory
branch and the attention masks carry order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from titans import mathops
from titans.attention import build_mac_mask, masked_attention, prepend_persistent, stream_window_mask
from titans.chunked import make_chunk_plan, per_chunk_constant_gates, run_chunked
from titans.config import TitansConfig, model_config_from_text, model_config_to_text
from titans.errors import ContractError, InputError
from titans.memory import (
    MemoryState,
    ProjectionSet,
    compute_gates,
    featurize,
    retrieve,
    run_sequential,
)

CHECKPOINT_MAGIC = b"TTNC"
CHECKPOINT_VERSION = 1
STATE_MAGIC = b"TTNB"
STATE_VERSION = 1

# initial gate logits (alpha, eta, theta): little forgetting, moderate momentum,
# small inner step; a deep memory diverges early with larger steps
GATE_BIAS = (-4.0, 0.0, -2.0)


class _Init:
    """Hands out consecutive seeds so every matrix gets its own stream."""

    def __init__(self, seed: int, dtype: torch.dtype):
        self.seed = seed * 1_000_003
        self.dtype = dtype

    def matrix(self, rows: int, cols: int) -> nn.Parameter:
        self.seed += 1
        return nn.Parameter(mathops.init_matrix(rows, cols, "scaled-uniform", self.seed, self.dtype))

    def normal(self, rows: int, cols: int, std: float) -> nn.Parameter:
        self.seed += 1
        gen = torch.Generator().manual_seed(self.seed)
        return nn.Parameter((torch.randn(rows, cols, generator=gen, dtype=torch.float64) * std).to(self.dtype))

    def ones(self, n: int) -> nn.Parameter:
        return nn.Parameter(torch.ones(n, dtype=self.dtype))


@dataclass
class BlockState:
    """Everything a block carries from one call to the next within a sequence.

    ``pos`` counts real tokens consumed. ``mem_hist``/``read_hist`` are the
    conv histories of the memory's write and (MAC) read streams. ``attn_k``/
    ``attn_v`` hold the last ``window - 1`` projected keys/values and
    ``prefix_k``/``prefix_v`` the persistent-prefix keys/values.
    """

    pos: int = 0
    memory: MemoryState | None = None
    mem_hist: dict = field(default_factory=dict)
    read_hist: dict = field(default_factory=dict)
    attn_k: torch.Tensor | None = None
    attn_v: torch.Tensor | None = None
    prefix_k: torch.Tensor | None = None
    prefix_v: torch.Tensor | None = None

    def detach(self) -> "BlockState":
        d = lambda t: None if t is None else t.detach()  # noqa: E731
        return BlockState(
            self.pos,
            None if self.memory is None else self.memory.detach(),
            {k: v.detach() for k, v in self.mem_hist.items()},
            {k: v.detach() for k, v in self.read_hist.items()},
            d(self.attn_k), d(self.attn_v), d(self.prefix_k), d(self.prefix_v),
        )

    def _records(self) -> list[tuple[str, torch.Tensor]]:
        out = []
        if self.memory is not None:
            out += [(f"memory.w{i}", w) for i, w in enumerate(self.memory.weights)]
            out += [(f"memory.s{i}", s) for i, s in enumerate(self.memory.momentum)]
        out += [(f"mem_hist.{k}", v) for k, v in sorted(self.mem_hist.items())]
        out += [(f"read_hist.{k}", v) for k, v in sorted(self.read_hist.items())]
        for name in ("attn_k", "attn_v", "prefix_k", "prefix_v"):
            if getattr(self, name) is not None:
                out.append((name, getattr(self, name)))
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        records = self._records()
        buf.write(STATE_MAGIC)
        buf.write(struct.pack("<IqI", STATE_VERSION, self.pos, len(records)))
        for name, t in records:
            mathops.write_tensor(buf, name, t)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, dtype: torch.dtype = torch.float64) -> "BlockState":
        if raw[:4] != STATE_MAGIC:
            raise ValueError("not a block state container")
        version, pos, count = struct.unpack("<IqI", raw[4:20])
        if version != STATE_VERSION:
            raise ValueError(f"unsupported block state version {version}")
        fh = io.BytesIO(raw[20:])
        state = cls(pos)
        weights, momentum = {}, {}
        for _ in range(count):
            name, t = mathops.read_tensor(fh)
            t = t.to(dtype)
            group, _, key = name.partition(".")
            if group == "memory":
                (weights if key[0] == "w" else momentum)[int(key[1:])] = t
            elif group in ("mem_hist", "read_hist"):
                getattr(state, group)[key] = t
            else:
                setattr(state, name, t)
        if weights:
            state.memory = MemoryState([weights[i] for i in sorted(weights)],
                                       [momentum[i] for i in sorted(momentum)])
        return state


class MemoryModule(nn.Module):
    """Slow parameters of one long-term memory plus its learnable start weights ``M0``."""

    def __init__(self, cfg: TitansConfig, init: _Init):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.w_q, self.w_k = init.matrix(d, d), init.matrix(d, d)
        # small values keep the inner loop's curvature low; the block renormalizes reads
        self.w_v = nn.Parameter(init.matrix(d, d).data * d**-0.5)
        if cfg.use_conv:
            delta = mathops.delta_filters(d, cfg.conv_kernel, init.dtype)
            self.conv_q = nn.Parameter(delta + init.matrix(d, cfg.conv_kernel).data)
            self.conv_k = nn.Parameter(delta + init.matrix(d, cfg.conv_kernel).data)
            self.conv_v = nn.Parameter(delta + init.matrix(d, cfg.conv_kernel).data)
        else:
            self.conv_q = self.conv_k = self.conv_v = None
        self.gate_w = nn.Parameter(init.matrix(d, 3).data * 0.1)
        self.gate_b = nn.Parameter(torch.tensor(GATE_BIAS, dtype=init.dtype))
        self.m0 = nn.ParameterList(init.matrix(d, d) for _ in range(cfg.memory_depth))

    def projection_set(self) -> ProjectionSet:
        c = self.cfg
        return ProjectionSet(
            self.w_q, self.w_k, self.w_v, self.gate_w, self.gate_b,
            self.conv_q, self.conv_k, self.conv_v,
            theta_max=c.theta_max, theta_squash=c.theta_squash,
            use_momentum=c.use_momentum, use_decay=c.use_decay,
        )

    def initial_state(self, batch_shape: tuple[int, ...]) -> MemoryState:
        return MemoryState.from_weights(list(self.m0), batch_shape)

    def read(self, x: torch.Tensor, state: MemoryState, hist: dict) -> tuple[torch.Tensor, dict]:
        """Retrieval without update (MAC's history slots)."""
        q, _, _, hist = featurize(x, self.projection_set(), hist)
        return retrieve(state, q), hist

    def forward(self, x: torch.Tensor, state: MemoryState, hist: dict, offset: int = 0):
        """Write every row of ``x`` into memory; return per-token post-write reads."""
        c = self.cfg
        proj = self.projection_set()
        q, k, v, hist = featurize(x, proj, hist)
        plan = make_chunk_plan(x.shape[-2], c.chunk_size, offset)
        if c.gate_mode == "chunk":
            gates = per_chunk_constant_gates(x, plan, proj)
        else:
            gates = compute_gates(x, proj)
        if c.inner_path == "sequential":
            state, out = run_sequential(state, q, k, v, gates, start_index=offset, check=False)
        else:
            state, out = run_chunked(state, q, k, v, gates, plan, c.detach_chunk_start)
        return out, state, hist


class GateCombine(nn.Module):
    """``g * norm_y(y) + (1 - g) * norm_m(m)`` with ``g = sigmoid([y_n | m_n] W + b)``."""

    def __init__(self, d: int, init: _Init):
        super().__init__()
        self.gain_y, self.gain_m = init.ones(d), init.ones(d)
        self.w = init.matrix(2 * d, d)
        self.b = nn.Parameter(torch.zeros(d, dtype=init.dtype))

    def forward(self, y: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        yn, mn = mathops.rms_norm(y, self.gain_y), mathops.rms_norm(m, self.gain_m)
        g = mathops.sigmoid(torch.cat([yn, mn], dim=-1) @ self.w + self.b)
        return g * yn + (1 - g) * mn


class TitansBlock(nn.Module):
    def __init__(self, cfg: TitansConfig, init: _Init):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.n_p = cfg.persistent
        self.norm = init.ones(d)
        self.persistent = init.matrix(self.n_p, d) if self.n_p else None
        if cfg.variant != "LMM":
            self.w_q, self.w_k, self.w_v = init.matrix(d, d), init.matrix(d, d), init.matrix(d, d)
        self.memory = MemoryModule(cfg, init) if cfg.use_memory else None
        if cfg.variant in ("MAC", "MAG") and cfg.use_memory:
            self.combine = GateCombine(d, init)
        self.core_norm = init.ones(d)
        self.w_gate = init.matrix(d, d)
        self.w_out = init.matrix(d, d)

    # -- helpers --------------------------------------------------------

    def _prefix(self, like: torch.Tensor) -> torch.Tensor:
        if self.persistent is None:
            return like.new_zeros(like.shape[:-2] + (0, like.shape[-1]))
        return self.persistent.expand(like.shape[:-2] + self.persistent.shape)

    def _memory_pass(self, rows: torch.Tensor, st: BlockState, offset: int) -> torch.Tensor:
        if st.memory is None:
            st.memory = self.memory.initial_state(rows.shape[:-2])
        out, st.memory, st.mem_hist = self.memory(rows, st.memory, st.mem_hist, offset)
        return out

    def _window_attention(self, x: torch.Tensor, st: BlockState, prefix: torch.Tensor | None) -> torch.Tensor:
        """Sliding-window attention of new rows ``x`` over prefix, cache and themselves."""
        w = self.cfg.window
        if prefix is not None:
            st.prefix_k, st.prefix_v = prefix @ self.w_k, prefix @ self.w_v
        k, v = x @ self.w_k, x @ self.w_v
        cache_k = st.attn_k if st.attn_k is not None else k[..., :0, :]
        cache_v = st.attn_v if st.attn_v is not None else v[..., :0, :]
        keys = torch.cat([st.prefix_k, cache_k, k], dim=-2)
        vals = torch.cat([st.prefix_v, cache_v, v], dim=-2)
        mask = stream_window_mask(x.shape[-2], cache_k.shape[-2], w, st.prefix_k.shape[-2])
        y = masked_attention(x @ self.w_q, keys, vals, mask, self.cfg.heads)
        keep = w - 1
        all_k, all_v = torch.cat([cache_k, k], dim=-2), torch.cat([cache_v, v], dim=-2)
        st.attn_k = all_k[..., all_k.shape[-2] - min(keep, all_k.shape[-2]):, :]
        st.attn_v = all_v[..., all_v.shape[-2] - min(keep, all_v.shape[-2]):, :]
        return y

    def _memory_over_prefixed(self, xn: torch.Tensor, st: BlockState) -> torch.Tensor:
        """Memory outputs for the real rows of ``[P ; x]`` (prefix only on the first call)."""
        first = st.pos == 0
        rows = prepend_persistent(xn, self._prefix(xn)) if first else xn
        out = self._memory_pass(rows, st, 0 if first else st.pos + self.n_p)
        return out[..., self.n_p:, :] if first else out

    # -- variants -------------------------------------------------------

    def _lmm(self, xn: torch.Tensor, st: BlockState) -> torch.Tensor:
        if self.memory is None:
            return torch.zeros_like(xn)
        return self._memory_over_prefixed(xn, st)

    def _mag(self, xn: torch.Tensor, st: BlockState) -> torch.Tensor:
        prefix = self._prefix(xn) if st.pos == 0 else None
        y = self._window_attention(xn, st, prefix)
        if self.memory is None:
            return y
        return self.combine(y, self._memory_over_prefixed(xn, st))

    def _mal(self, xn: torch.Tensor, st: BlockState) -> torch.Tensor:
        first = st.pos == 0
        rows = prepend_persistent(xn, self._prefix(xn)) if first else xn
        if self.memory is not None:
            rows = self._memory_pass(rows, st, 0 if first else st.pos + self.n_p)
        prefix = rows[..., : self.n_p, :] if first else None
        return self._window_attention(rows[..., self.n_p:, :] if first else rows, st, prefix)

    def mac_segment(self, seg: torch.Tensor, st: BlockState) -> torch.Tensor:
        """One MAC segment: read history slots, attend, write, combine."""
        c = self.cfg
        if seg.shape[-2] > c.segment_len:
            raise ContractError(f"segment of {seg.shape[-2]} tokens exceeds segment_len={c.segment_len}")
        if self.memory is not None:
            if st.memory is None:
                st.memory = self.memory.initial_state(seg.shape[:-2])
            elif c.reset_momentum_per_segment:
                st.memory = MemoryState(st.memory.weights, [torch.zeros_like(s) for s in st.memory.momentum])
            slots, st.read_hist = self.memory.read(seg, st.memory, st.read_hist)
        else:
            slots = seg[..., :0, :]
        ctx = torch.cat([self._prefix(seg), slots, seg], dim=-2)
        head = self.n_p + slots.shape[-2]
        mask = build_mac_mask(self.n_p, slots.shape[-2], seg.shape[-2], c.mac_slot_access)[head:]
        y = masked_attention(seg @ self.w_q, ctx @ self.w_k, ctx @ self.w_v, mask, c.heads)
        if self.memory is None:
            return y
        return self.combine(y, self._memory_pass(y, st, st.pos))

    def _mac(self, xn: torch.Tensor, st: BlockState) -> torch.Tensor:
        C = self.cfg.segment_len
        if st.pos % C:
            raise ContractError("MAC calls must start on a segment boundary")
        outs = []
        for s in range(0, xn.shape[-2], C):
            seg = xn[..., s : s + C, :]
            outs.append(self.mac_segment(seg, st))
            st.pos += seg.shape[-2]
        st.pos -= xn.shape[-2]  # forward() advances pos once for the whole call
        return torch.cat(outs, dim=-2) if outs else torch.zeros_like(xn)

    def forward(self, x: torch.Tensor, st: BlockState) -> tuple[torch.Tensor, BlockState]:
        xn = mathops.rms_norm(x, self.norm)
        core = getattr(self, f"_{self.cfg.variant.lower()}")(xn, st)
        gated = mathops.rms_norm(core, self.core_norm) * mathops.silu(xn @ self.w_gate)
        st.pos += x.shape[-2]
        return x + gated @ self.w_out, st


class TitansModel(nn.Module):
    def __init__(self, cfg: TitansConfig):
        super().__init__()
        self.cfg = cfg
        self.dtype = mathops.resolve_dtype(cfg.dtype)
        init = _Init(cfg.seed, self.dtype)
        self.embed = init.normal(cfg.vocab_size, cfg.d_model, 0.02)
        self.blocks = nn.ModuleList(TitansBlock(cfg, init) for _ in range(cfg.n_blocks))
        self.final_norm = init.ones(cfg.d_model)

    def initial_state(self) -> list[BlockState]:
        return [BlockState() for _ in self.blocks]

    def unembed(self, h: torch.Tensor) -> torch.Tensor:
        return mathops.rms_norm(h, self.final_norm) @ self.embed.mT

    def forward(self, ids: torch.Tensor, state: list[BlockState] | None = None):
        """Logits for ``ids`` of shape (N,) or (B, N), plus the carried block states.

        A passed-in state is detached first, so outer gradients stop at call
        boundaries.
        """
        ids = torch.as_tensor(ids)
        if ids.dtype.is_floating_point or (ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size)):
            raise InputError(f"token ids must be integers in [0, {self.cfg.vocab_size})")
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids.unsqueeze(0)
        states = self.initial_state() if state is None else [s.detach() for s in state]
        x = self.embed[ids]
        for block, st in zip(self.blocks, states):
            x, _ = block(x, st)
        logits = self.unembed(x)
        return (logits[0] if squeeze else logits), states


def model_forward(ids, model: TitansModel, state=None) -> torch.Tensor:
    """Logits for a fresh sequence (or continuing ``state``)."""
    return model(ids, state)[0]


def param_count_formula(cfg: TitansConfig) -> int:
    """Closed-form parameter count; must equal the sum over the built model."""
    d, K, L, n_p = cfg.d_model, cfg.conv_kernel, cfg.memory_depth, cfg.persistent
    block = 2 * d + 2 * d * d + n_p * d
    if cfg.variant != "LMM":
        block += 3 * d * d
    if cfg.use_memory:
        block += 3 * d * d + 3 * d + 3 + L * d * d + (3 * d * K if cfg.use_conv else 0)
        if cfg.variant in ("MAC", "MAG"):
            block += 2 * d + 2 * d * d + d
    return cfg.vocab_size * d + d + cfg.n_blocks * block


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- checkpoints -----------------------------------------------------------
#
# "TTNC" | u32 version | u32 text_len | config text | u32 count | tensor records

def save_checkpoint(path: str | Path, model: TitansModel) -> None:
    text = model_config_to_text(model.cfg).encode("utf-8")
    params = dict(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            mathops.write_tensor(fh, name, p)


def load_checkpoint(path: str | Path) -> TitansModel:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        version, text_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = model_config_from_text(fh.read(text_len).decode("utf-8"))
        model = TitansModel(cfg)
        params = dict(model.named_parameters())
        (count,) = struct.unpack("<I", fh.read(4))
        seen = set()
        for _ in range(count):
            name, t = mathops.read_tensor(fh)
            if name not in params or params[name].shape != t.shape:
                raise ValueError(f"checkpoint tensor {name!r} does not fit the model")
            with torch.no_grad():
                params[name].copy_(t.to(params[name].dtype))
            seen.add(name)
        if seen != set(params):
            raise ValueError(f"checkpoint is missing {sorted(set(params) - seen)}")
    return model
