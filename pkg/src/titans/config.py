"""Model, training and task configuration.

All three share one flat ``key=value`` text format (``#`` starts a comment).
Every key belongs to exactly one of :class:`TitansConfig`, :class:`TrainConfig`
or :class:`TaskSpec`; unknown keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

from titans.errors import ConfigError

VARIANTS = ("MAC", "MAG", "MAL", "LMM")
TASKS = ("copy", "mqar", "sniah-toy", "char-lm")

# Reference-scale settings, kept for documentation. Desk defaults below are smaller.
REFERENCE_TRAIN_DEFAULTS = {
    "optimizer": "AdamW",
    "lr": 4e-4,
    "weight_decay": 0.1,
    "schedule": "cosine",
    "vocab_size": 32_000,
    "seq_len": 4096,
}


@dataclass
class TitansConfig:
    """Architecture settings.

    Attributes:
        variant: one of MAC, MAG, MAL, LMM.
        mem_depth: layers in the memory MLP (forced to 1 when ``use_deep_memory`` is off).
        segment_len: MAC segment length.
        window: sliding-window width for MAG/MAL.
        chunk_size: inner-loop chunk size; 1 reproduces the token-by-token update.
        theta_max: upper bound of the inner learning rate; larger values let a deep memory diverge on long inputs.
        inner_path: ``chunked`` or ``sequential`` inner-loop implementation.
        gate_mode: ``token`` (per-token gates) or ``chunk`` (one triple per chunk).
        mac_slot_access: ``full`` or ``causal`` access from segment rows to memory slots.
        detach_chunk_start: stop outer gradients through chunk-start weights.
        reset_momentum_per_segment: zero the MAC momentum at each segment start.
        use_memory: drop the memory branch entirely (attention-only control).
    """

    variant: str = "LMM"
    d_model: int = 64
    n_blocks: int = 2
    vocab_size: int = 64
    mem_depth: int = 2
    segment_len: int = 64
    window: int = 32
    chunk_size: int = 16
    n_persistent: int = 4
    heads: int = 1
    conv_kernel: int = 4
    theta_max: float = 0.25
    theta_squash: str = "sigmoid"
    inner_path: str = "chunked"
    gate_mode: str = "token"
    mac_slot_access: str = "full"
    detach_chunk_start: bool = False
    reset_momentum_per_segment: bool = False
    use_conv: bool = True
    use_momentum: bool = True
    use_decay: bool = True
    use_persistent: bool = True
    use_deep_memory: bool = True
    use_memory: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("d_model", "vocab_size", "mem_depth", "segment_len", "window",
                     "chunk_size", "heads", "conv_kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_blocks < 0 or self.n_persistent < 0:
            raise ConfigError("n_blocks and n_persistent must be >= 0")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.theta_max <= 0:
            raise ConfigError("theta_max must be positive")
        choices = {
            "theta_squash": ("sigmoid", "softplus"),
            "inner_path": ("chunked", "sequential"),
            "gate_mode": ("token", "chunk"),
            "mac_slot_access": ("full", "causal"),
            "dtype": ("float64", "float32"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def memory_depth(self) -> int:
        return self.mem_depth if self.use_deep_memory else 1

    @property
    def persistent(self) -> int:
        return self.n_persistent if self.use_persistent else 0


@dataclass
class TrainConfig:
    """Outer-loop optimizer settings (AdamW, cosine decay after linear warmup)."""

    lr: float = 3e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 32
    steps: int = 1000
    warmup_steps: int = 50
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0
    log_every: int = 50
    eval_batches: int = 8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("lr > 0, batch_size >= 1, steps >= 0, warmup_steps >= 0 required")
        if self.grad_clip <= 0 or self.log_every < 1 or self.eval_batches < 1:
            raise ConfigError("grad_clip > 0, log_every >= 1, eval_batches >= 1 required")


@dataclass
class TaskSpec:
    """Synthetic task instance family.

    ``seed`` is the base seed; batch ``i`` of a split uses a distinct derived
    seed, and the train and eval splits use disjoint ranges.
    """

    task: str = "mqar"
    vocab_size: int = 64
    seq_len: int = 32
    n_pairs: int = 8
    n_queries: int = 8
    needle_depth: int = -1
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")


# --- flat text form --------------------------------------------------------

# task.seed is spelled data_seed; vocab_size is shared by model and task
_SECTIONS = {"model": TitansConfig, "train": TrainConfig, "task": TaskSpec}
_ALIASES = {("task", "seed"): "data_seed"}


def _keymap() -> dict[str, list[tuple[str, str]]]:
    out: dict[str, list[tuple[str, str]]] = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            key = _ALIASES.get((section, f.name), f.name)
            out.setdefault(key, []).append((section, f.name))
    return out


def _convert(raw: str, like: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    model: TitansConfig = field(default_factory=TitansConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)

    def to_text(self) -> str:
        """Canonical text: every key once, in declaration order."""
        lines, seen = [], set()
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                key = _ALIASES.get((section, f.name), f.name)
                if key in seen:
                    continue
                seen.add(key)
                lines.append(f"{key}={_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        keymap = _keymap()
        values = {s: dataclasses.asdict(getattr(self, s)) for s in _SECTIONS}
        for key, raw in pairs.items():
            if key not in keymap:
                raise ConfigError(f"unknown config key {key!r}")
            for section, attr in keymap[key]:
                values[section][attr] = _convert(raw, values[section][attr], key)
        try:
            return RunConfig(*(cls(**values[s]) for s, cls in _SECTIONS.items()))
        except TypeError as exc:  # pragma: no cover - defensive
            raise ConfigError(str(exc)) from None


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    return (base or RunConfig()).with_overrides(parse_pairs(text))


def model_config_to_text(cfg: TitansConfig) -> str:
    return "".join(f"{f.name}={_format(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def model_config_from_text(text: str) -> TitansConfig:
    """Parse text holding model keys only (the checkpoint header)."""
    pairs = parse_pairs(text)
    values = dataclasses.asdict(TitansConfig())
    for key, raw in pairs.items():
        if key not in values:
            raise ConfigError(f"unknown model config key {key!r}")
        values[key] = _convert(raw, values[key], key)
    return TitansConfig(**values)
