"""Wall-clock throughput of the inner-loop paths.

Numbers are only comparable within one machine and one run; the useful
outputs are the relative orderings (chunked vs sequential, shallow vs deep).
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import torch

from titans.config import TitansConfig
from titans.model import TitansModel
from titans.train import MetricsRow, MetricsWriter


@dataclass
class BenchResult:
    path: str
    depth: int
    length: int
    batch: int
    chunk_size: int
    tokens_per_sec: float
    seconds: float


@torch.no_grad()
def time_forward(model: TitansModel, ids: torch.Tensor, repeats: int = 3) -> float:
    """Best-of-``repeats`` seconds for one forward pass (the minimum is least noisy)."""
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        model(ids)
        best = min(best, time.perf_counter() - start)
    return best


def bench_throughput(
    cfg: TitansConfig,
    lengths: list[int] | tuple[int, ...] = (4096,),
    batch: int = 1,
    depths: list[int] | tuple[int, ...] = (1, 2, 3, 4),
    paths: tuple[str, ...] = ("sequential", "chunked"),
    repeats: int = 3,
    metrics_stem=None,
    seed: int = 0,
) -> list[BenchResult]:
    """Tokens/second of model forward passes per (length, path, depth).

    ``chunked`` runs use ``cfg.chunk_size``; ``sequential`` runs are the
    token-by-token loop. Only the first listed depth is timed on the
    sequential path unless it is the only path.
    """
    writer = MetricsWriter(metrics_stem) if metrics_stem is not None else None
    gen = torch.Generator().manual_seed(seed)
    results: list[BenchResult] = []
    start = time.perf_counter()
    for n in lengths:
        ids = torch.randint(0, cfg.vocab_size, (batch, n), generator=gen)
        for path in paths:
            path_depths = depths if path == "chunked" or len(paths) == 1 else depths[:1]
            for depth in path_depths:
                run_cfg = dataclasses.replace(cfg, inner_path=path, mem_depth=depth, use_deep_memory=True)
                model = TitansModel(run_cfg)
                model(ids[:, : min(n, 2 * cfg.chunk_size)])  # warm-up
                secs = time_forward(model, ids, repeats)
                res = BenchResult(path, depth, n, batch, cfg.chunk_size if path == "chunked" else 1,
                                  batch * n / secs, secs)
                results.append(res)
                if writer:
                    writer.write(MetricsRow(len(results) - 1, float("nan"), float("nan"),
                                            res.tokens_per_sec, time.perf_counter() - start))
    return results


def format_table(results: list[BenchResult]) -> str:
    head = f"{'path':<11}{'L_M':>4}{'N':>7}{'B':>4}{'b':>5}{'tok/s':>12}{'sec':>9}"
    lines = [head]
    for r in results:
        lines.append(f"{r.path:<11}{r.depth:>4}{r.length:>7}{r.batch:>4}{r.chunk_size:>5}"
                     f"{r.tokens_per_sec:>12.1f}{r.seconds:>9.3f}")
    return "\n".join(lines)
