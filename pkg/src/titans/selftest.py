"""Quick oracle and property checks that ship with the package.

Each check draws a few random instances, compares against an independent
reference and reports its worst error. The full suites live in ``tests/``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch

from titans import mathops
from titans.attention import (
    kernel_linear_attention,
    recurrent_linear_attention,
    sliding_window_attention,
)
from titans.autodiff import grad_check
from titans.chunked import MomentumScanInput, make_chunk_plan, momentum_scan, run_chunked
from titans.memory import (
    GateSignals,
    MemoryState,
    delta_rule_step,
    gated_delta_rule_step,
    run_sequential,
    surprise_step,
    tape_assoc_loss,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name:<32} worst={self.worst:.3e} tol={self.tolerance:.0e} ({self.seconds:.2f}s)"


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _state(g, depth, d, batch=()):
    w = [torch.randn(*batch, d, d, generator=g, dtype=torch.float64) * d**-0.5 for _ in range(depth)]
    s = [torch.randn(*batch, d, d, generator=g, dtype=torch.float64) * 0.1 for _ in range(depth)]
    return MemoryState(w, s)


def _gates(g, n):
    return GateSignals(*(torch.rand(n, generator=g, dtype=torch.float64) for _ in range(3)))


def check_chunked_b1(cases: int = 20) -> float:
    worst = 0.0
    for c in range(cases):
        g = _gen(c)
        depth, n, d = 1 + c % 2, 1 + c % 17, 2 + c % 7
        st = _state(g, depth, d)
        q, v = (torch.randn(n, d, generator=g, dtype=torch.float64) for _ in range(2))
        k = mathops.l2_normalize_rows(torch.randn(n, d, generator=g, dtype=torch.float64))
        gates = _gates(g, n)
        a, oa = run_sequential(st, q, k, v, gates)
        b, ob = run_chunked(st, q, k, v, gates, make_chunk_plan(n, 1))
        diffs = [(x - y).abs().max().item() for x, y in zip(a.weights + a.momentum, b.weights + b.momentum)]
        worst = max(worst, *diffs, (oa - ob).abs().max().item())
    return worst


def check_scan(cases: int = 100) -> float:
    worst = 0.0
    for c in range(cases):
        g = _gen(c)
        n = 1 + c % 64
        eta, theta = torch.rand(n, generator=g, dtype=torch.float64), torch.rand(n, generator=g, dtype=torch.float64)
        u, s = torch.randn(n, 2, 2, generator=g, dtype=torch.float64), torch.randn(2, 2, generator=g, dtype=torch.float64)
        out = momentum_scan(MomentumScanInput(u, eta, theta), s)
        for t in range(n):
            s = eta[t] * s - theta[t] * u[t]
            worst = max(worst, (out[t] - s).abs().max().item())
    return worst


def check_reductions(cases: int = 100) -> float:
    worst = 0.0
    for c in range(cases):
        g = _gen(c)
        d = 2 + c % 5
        S = torch.randn(d, d, generator=g, dtype=torch.float64)
        k = mathops.l2_normalize_rows(torch.randn(d, generator=g, dtype=torch.float64))
        v = torch.randn(d, generator=g, dtype=torch.float64)
        theta, alpha = torch.rand(2, generator=g, dtype=torch.float64).tolist()
        st = MemoryState([S], [torch.zeros_like(S)])
        one = surprise_step(st, k, v, GateSignals(alpha, theta, 0.0)).weights[0]
        zero = surprise_step(st, k, v, GateSignals(0.0, theta, 0.0)).weights[0]
        worst = max(worst, (one - gated_delta_rule_step(S, k, v, theta, alpha)).abs().max().item(),
                    (zero - delta_rule_step(S, k, v, theta)).abs().max().item())
    return worst


def check_linear_attention(cases: int = 20) -> float:
    worst = 0.0
    for c in range(cases):
        g = _gen(c)
        n, d = 1 + c % 16, 1 + c % 5
        x = torch.rand(n, d, generator=g, dtype=torch.float64) + 0.1
        ws = [torch.rand(d, d, generator=g, dtype=torch.float64) + 0.1 for _ in range(3)]
        worst = max(worst, (kernel_linear_attention(x, *ws) - recurrent_linear_attention(x, *ws)).abs().max().item())
    return worst


def check_grad(cases: int = 3) -> float:
    worst = 0.0
    for depth in range(1, 5):
        for c in range(cases):
            g = _gen(100 * depth + c)
            params = {f"W{i}": torch.randn(3, 3, generator=g, dtype=torch.float64) * 0.7 for i in range(depth)}
            params["k"] = mathops.l2_normalize_rows(torch.randn(1, 3, generator=g, dtype=torch.float64))
            params["v"] = torch.randn(1, 3, generator=g, dtype=torch.float64)

            def f(tape, leaves, depth=depth):
                return tape_assoc_loss(tape, [leaves[f"W{i}"] for i in range(depth)], leaves["k"], leaves["v"])

            worst = max(worst, grad_check(f, params, 1e-5))
    return worst


def check_frozen_memory(cases: int = 10) -> float:
    worst = 0.0
    for c in range(cases):
        g = _gen(c)
        # a fresh memory has no momentum; with any S_0 the weights drift by eta-scaled S_0
        st = MemoryState.from_weights(_state(g, 2, 3).weights)
        n = 5
        k, v = torch.randn(n, 3, generator=g, dtype=torch.float64), torch.randn(n, 3, generator=g, dtype=torch.float64)
        gates = GateSignals(torch.zeros(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64),
                            torch.rand(n, generator=g, dtype=torch.float64))
        out, _ = run_sequential(st, k, k, v, gates)
        worst = max(worst, *((a - b).abs().max().item() for a, b in zip(out.weights, st.weights)))
    return worst


def check_window_causality(cases: int = 10) -> float:
    """Largest change of an output row that only depends on unchanged tokens (must be 0)."""
    worst = 0.0
    for c in range(cases):
        g = _gen(c)
        n, w = 6 + c % 5, 1 + c % 3
        x = torch.randn(n, 3, generator=g, dtype=torch.float64)
        ws = [torch.randn(3, 3, generator=g, dtype=torch.float64) for _ in range(3)]
        cut = n // 2
        y = x.clone()
        y[cut:] = torch.randn(n - cut, 3, generator=g, dtype=torch.float64)
        a, b = sliding_window_attention(x, *ws, w), sliding_window_attention(y, *ws, w)
        worst = max(worst, (a[:cut] - b[:cut]).abs().max().item())
    return worst


CHECKS: list[tuple[str, Callable[[], float], float]] = [
    ("chunked b=1 vs sequential", check_chunked_b1, 1e-12),
    ("momentum scan vs recurrence", check_scan, 1e-10),
    ("delta rule reductions", check_reductions, 1e-12),
    ("linear attention duality", check_linear_attention, 1e-10),
    ("tape vs finite differences", check_grad, 1e-4),
    ("frozen gates keep weights", check_frozen_memory, 0.0),
    ("window attention causality", check_window_causality, 0.0),
]


def run_selftest(log=print) -> list[CheckResult]:
    results = []
    for name, fn, tol in CHECKS:
        start = time.perf_counter()
        try:
            worst = fn()
        except Exception as exc:  # a crash is a failed check, reported not raised
            if log:
                log(f"FAIL  {name}: {type(exc).__name__}: {exc}")
            results.append(CheckResult(name, False, float("nan"), tol, time.perf_counter() - start))
            continue
        res = CheckResult(name, worst <= tol, worst, tol, time.perf_counter() - start)
        results.append(res)
        if log:
            log(res.line())
    return results
