"""Outer-loop training and evaluation."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from titans import autodiff
from titans.config import TaskSpec, TitansConfig, TrainConfig
from titans.errors import ConfigError, NumericalError
from titans.model import TitansModel, load_checkpoint, save_checkpoint
from titans.tasks import IGNORE, make_batch

METRIC_FIELDS = ("step", "loss", "accuracy", "tokens_per_sec", "wall_clock")


@dataclass
class MetricsRow:
    step: int
    loss: float
    accuracy: float
    tokens_per_sec: float
    wall_clock: float


class MetricsWriter:
    """Appends rows to ``<stem>.csv`` and a JSON-lines mirror ``<stem>.jsonl``."""

    def __init__(self, stem: str | Path):
        self.csv_path = Path(f"{stem}.csv")
        self.jsonl_path = Path(f"{stem}.jsonl")
        self.csv_path.parent.mkdir(parents=True, exist_ok=True)
        if not self.csv_path.exists():
            with open(self.csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)
        self._last_step = -1

    def write(self, row: MetricsRow) -> None:
        if row.step < self._last_step:
            raise ValueError("metrics rows must be appended in step order")
        self._last_step = row.step
        with open(self.csv_path, "a", newline="") as fh:
            csv.writer(fh).writerow([getattr(row, f) for f in METRIC_FIELDS])
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps(asdict(row)) + "\n")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * lr``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    floor = cfg.min_lr_ratio * cfg.lr
    return floor + 0.5 * (cfg.lr - floor) * (1 + math.cos(math.pi * progress))


def masked_loss(logits: torch.Tensor, targets: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Cross-entropy over scored positions, plus correct and scored counts."""
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    loss = F.cross_entropy(flat_logits, flat_targets, ignore_index=IGNORE)
    scored = flat_targets != IGNORE
    correct = (flat_logits.argmax(-1) == flat_targets) & scored
    return loss, correct.sum(), scored.sum()


def _check_task(model_cfg: TitansConfig, spec: TaskSpec) -> None:
    if spec.vocab_size != model_cfg.vocab_size:
        raise ConfigError(
            f"task vocabulary {spec.vocab_size} != model vocabulary {model_cfg.vocab_size}"
        )


def _optimizer(model: TitansModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay = [p for p in model.parameters() if p.dim() >= 2]
    plain = [p for p in model.parameters() if p.dim() < 2]
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": plain, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def train(
    model_cfg: TitansConfig,
    spec: TaskSpec,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    min_gap: int = 0,
    model: TitansModel | None = None,
    log=None,
) -> tuple[TitansModel, list[MetricsRow]]:
    """Train on fresh batches of ``spec``; returns the model and its metric rows.

    With ``out_dir`` set, metrics go to ``metrics.csv``/``metrics.jsonl`` and
    the final checkpoint to ``model.ttnc`` there.
    """
    _check_task(model_cfg, spec)
    model = model or TitansModel(model_cfg)
    opt = _optimizer(model, cfg)
    params = dict(model.named_parameters())
    writer = MetricsWriter(Path(out_dir) / "metrics") if out_dir is not None else None
    rows: list[MetricsRow] = []
    start = time.perf_counter()
    window_tokens, window_start = 0, start
    max_grad = 0.0
    for step in range(cfg.steps):
        inputs, targets = make_batch(spec, cfg.batch_size, step, "train", min_gap)
        logits, _ = model(inputs)
        loss, correct, scored = masked_loss(logits, targets)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step} (max |grad| so far {max_grad:.3g})")
        grads = autodiff.gradients(loss, params)
        for name, p in params.items():
            p.grad = grads[name]
        max_grad = max(max_grad, max(g.abs().max().item() for g in grads.values()))
        if not math.isfinite(max_grad):
            raise NumericalError(f"non-finite gradient at step {step}")
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        for group in opt.param_groups:
            group["lr"] = lr_at(step, cfg)
        opt.step()
        window_tokens += inputs.numel()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            now = time.perf_counter()
            row = MetricsRow(step, loss.item(), (correct / scored.clamp_min(1)).item(),
                             window_tokens / max(now - window_start, 1e-9), now - start)
            window_tokens, window_start = 0, now
            rows.append(row)
            if writer:
                writer.write(row)
            if log:
                log(row)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "model.ttnc", model)
    return model, rows


@torch.no_grad()
def evaluate(
    model: TitansModel | str | Path,
    spec: TaskSpec,
    n_batches: int = 8,
    batch_size: int = 32,
    min_gap: int = 0,
) -> dict[str, float]:
    """Teacher-forced accuracy and loss on the eval split.

    Each batch is a fresh forward pass, so fast weights start from ``M0``
    for every sequence and slow weights are never touched.
    """
    if not isinstance(model, TitansModel):
        model = load_checkpoint(model)
    _check_task(model.cfg, spec)
    total_loss, total_correct, total_scored = 0.0, 0, 0
    for i in range(n_batches):
        inputs, targets = make_batch(spec, batch_size, i, "eval", min_gap)
        logits, _ = model(inputs)
        loss, correct, scored = masked_loss(logits, targets)
        total_loss += loss.item() * scored.item()
        total_correct += correct.item()
        total_scored += scored.item()
    return {
        "accuracy": total_correct / max(total_scored, 1),
        "loss": total_loss / max(total_scored, 1),
        "scored": total_scored,
    }
