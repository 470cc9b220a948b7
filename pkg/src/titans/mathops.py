"""Dense kernels, activations, normalizations and seeded initialization.

Every function takes and returns ``torch.Tensor``. Leading batch dimensions
are allowed everywhere; the trailing two dims are (rows, cols).
"""

from __future__ import annotations

import math
import struct
from typing import BinaryIO

import numpy as np
import torch

from titans.errors import ShapeError

DEFAULT_DTYPE = torch.float64


def resolve_dtype(name: str) -> torch.dtype:
    """Map ``"float64"``/``"float32"`` to a torch dtype."""
    try:
        return {"float64": torch.float64, "float32": torch.float32}[name]
    except KeyError:
        raise ValueError(f"unsupported dtype {name!r}") from None


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product with a fixed accumulation order.

    Accumulates rank-1 terms over the inner index from 0 upward, so the
    result is reproducible bit-for-bit against a plain triple loop. Hot
    paths elsewhere use BLAS ``@``; this kernel is the reference.
    """
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    inner = a.shape[-1]
    if inner == 0:
        shape = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
        return torch.zeros(shape, dtype=a.dtype)
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for j in range(1, inner):
        out = out + a[..., :, j : j + 1] * b[..., j : j + 1, :]
    return out


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    shifted = m - m.amax(dim=-1, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def sigmoid(m: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(m)


def silu(m: torch.Tensor) -> torch.Tensor:
    return m * torch.sigmoid(m)


def silu_grad(m: torch.Tensor) -> torch.Tensor:
    """Derivative of silu, s(x) * (1 + x * (1 - s(x)))."""
    s = torch.sigmoid(m)
    return s * (1 + m * (1 - s))


def softplus(m: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.softplus(m)


def l2_normalize_rows(m: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Scale each row to unit 2-norm; rows with norm below ``eps`` become ~0."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = torch.linalg.vector_norm(m, dim=-1, keepdim=True)
    return m / norm.clamp_min(eps)


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def causal_depthwise_conv1d(
    seq: torch.Tensor,
    filters: torch.Tensor,
    kernel: int | None = None,
    history: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-channel causal convolution.

    ``out[t, c] = sum_j filters[c, j] * seq[t - j, c]`` where positions before
    the start read from ``history`` (the previous ``kernel - 1`` rows) or zero.

    Args:
        seq: (..., N, C) sequence.
        filters: (C, kernel) taps; tap 0 multiplies the current position.
        kernel: optional explicit kernel length, checked against ``filters``.
        history: optional (..., kernel - 1, C) rows preceding ``seq``.
    """
    channels, taps = filters.shape
    if kernel is not None and kernel != taps:
        raise ShapeError(f"conv: kernel={kernel} but filters have {taps} taps")
    if seq.shape[-1] != channels:
        raise ShapeError(f"conv: sequence has {seq.shape[-1]} channels, filters {channels}")
    n = seq.shape[-2]
    if history is None:
        pad = seq.new_zeros(seq.shape[:-2] + (taps - 1, channels))
    else:
        if history.shape[-2] != taps - 1:
            raise ShapeError(f"conv: history needs {taps - 1} rows, got {history.shape[-2]}")
        pad = history.expand(seq.shape[:-2] + history.shape[-2:])
    padded = torch.cat([pad, seq], dim=-2)
    out = filters[:, 0] * padded[..., taps - 1 : taps - 1 + n, :]
    for j in range(1, taps):
        out = out + filters[:, j] * padded[..., taps - 1 - j : taps - 1 - j + n, :]
    return out


def delta_filters(channels: int, kernel: int, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    """Filters that make the convolution an identity map."""
    f = torch.zeros(channels, kernel, dtype=dtype)
    f[:, 0] = 1.0
    return f


def init_matrix(
    rows: int,
    cols: int,
    scheme: str = "scaled-uniform",
    seed: int = 0,
    dtype: torch.dtype = DEFAULT_DTYPE,
) -> torch.Tensor:
    """Deterministic initialization.

    ``scaled-uniform`` draws from U(-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))).
    """
    if scheme == "zeros":
        return torch.zeros(rows, cols, dtype=dtype)
    if scheme != "scaled-uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    gen = torch.Generator().manual_seed(int(seed))
    bound = math.sqrt(6.0 / (rows + cols))
    u = torch.rand(rows, cols, generator=gen, dtype=torch.float64)
    return ((2 * u - 1) * bound).to(dtype)


# --- binary tensor records -------------------------------------------------
#
# record := u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim] | f64 data (LE)

def write_tensor(fh: BinaryIO, name: str, t: torch.Tensor) -> None:
    raw = name.encode("utf-8")
    data = t.detach().to(torch.float64).contiguous().cpu()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", data.dim()))
    fh.write(struct.pack(f"<{data.dim()}I", *data.shape))
    fh.write(data.numpy().astype("<f8").tobytes())


def read_tensor(fh: BinaryIO) -> tuple[str, torch.Tensor]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = math.prod(shape)
    buf = _read_exact(fh, 8 * count)
    values = np.frombuffer(buf, dtype="<f8").astype(np.float64)
    return name, torch.from_numpy(values.copy()).reshape(shape)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"expected {n} bytes, got {len(buf)}")
    return buf
