"""Synthetic sequence tasks and reference oracles.

Token layout (any vocabulary of at least 8 ids):

    0 PAD, 1 SEP, 2 QUERY, 3 BLANK
    keys   [4, 4 + n_keys)
    values [4 + n_keys, vocab)      with n_keys = (vocab - 4) // 2

Targets use ``IGNORE`` outside positions that are scored. Every generator is
a pure function of (spec, seed): the ``batch`` helpers derive one numpy
stream per (seed, split, index), so train and eval never share a stream.
"""

from __future__ import annotations

import dataclasses
import string

import numpy as np
import torch

from titans.config import TaskSpec
from titans.errors import ContractError

PAD, SEP, QUERY, BLANK = 0, 1, 2, 3
N_SPECIAL = 4
IGNORE = -100
SPLITS = {"train": 0, "eval": 1}


def key_range(vocab: int) -> range:
    return range(N_SPECIAL, N_SPECIAL + (vocab - N_SPECIAL) // 2)


def value_range(vocab: int) -> range:
    return range(N_SPECIAL + (vocab - N_SPECIAL) // 2, vocab)


def _check_vocab(vocab: int) -> None:
    if vocab < N_SPECIAL + 4:
        raise ContractError(f"vocabulary of {vocab} leaves no room for keys and values")


def _rng(seed: int, split: str = "train", index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS[split], index])


# --- generators (vectorized over n instances) ------------------------------

def _copy(rng, spec: TaskSpec, n: int):
    if spec.seq_len % 2 or spec.seq_len < 2:
        raise ContractError("copy needs an even length >= 2")
    _check_vocab(spec.vocab_size)
    m = spec.seq_len // 2
    symbols = rng.integers(N_SPECIAL, spec.vocab_size, size=(n, m))
    inputs = np.concatenate(
        [symbols, np.full((n, 1), SEP), np.full((n, m - 1), BLANK)], axis=1
    )
    targets = np.full((n, spec.seq_len), IGNORE)
    targets[:, m:] = symbols
    return inputs, targets


def _mqar(rng, spec: TaskSpec, n: int):
    _check_vocab(spec.vocab_size)
    keys, values = key_range(spec.vocab_size), value_range(spec.vocab_size)
    k, q = spec.n_pairs, spec.n_queries
    if k < 1 or q < 1 or 2 * k + q > spec.seq_len:
        raise ContractError(f"{k} pairs and {q} queries do not fit length {spec.seq_len}")
    if k > len(keys):
        raise ContractError(f"{k} distinct keys requested, only {len(keys)} available")
    # argsort of uniforms gives a random distinct key subset per row
    pair_keys = np.argsort(rng.random((n, len(keys))), axis=1)[:, :k] + keys.start
    pair_vals = rng.integers(values.start, values.stop, size=(n, k))
    if q <= k:
        which = np.argsort(rng.random((n, k)), axis=1)[:, :q]
    else:
        which = rng.integers(0, k, size=(n, q))
    inputs = np.full((n, spec.seq_len), PAD)
    targets = np.full((n, spec.seq_len), IGNORE)
    inputs[:, 0 : 2 * k : 2] = pair_keys
    inputs[:, 1 : 2 * k : 2] = pair_vals
    rows = np.arange(n)[:, None]
    inputs[:, 2 * k : 2 * k + q] = pair_keys[rows, which]
    targets[:, 2 * k : 2 * k + q] = pair_vals[rows, which]
    return inputs, targets


def _sniah(rng, spec: TaskSpec, n: int, min_gap: int = 0):
    """Filler of value tokens, one ``[key, value]`` needle, then the key as query.

    The output has ``seq_len + 1`` tokens; the needle key sits at ``depth``
    and the query at the last position, ``seq_len - depth`` tokens later.
    ``min_gap`` bounds that distance from below when the depth is random.
    """
    _check_vocab(spec.vocab_size)
    keys, values = key_range(spec.vocab_size), value_range(spec.vocab_size)
    length = spec.seq_len
    if spec.needle_depth >= 0:
        if spec.needle_depth > length - 2:
            raise ContractError(f"needle depth {spec.needle_depth} does not fit length {length}")
        depth = np.full(n, spec.needle_depth)
    else:
        hi = length - max(min_gap, 2)
        if hi < 0:
            raise ContractError(f"gap {min_gap} does not fit length {length}")
        depth = rng.integers(0, hi + 1, size=n)
    inputs = rng.integers(values.start, values.stop, size=(n, length + 1))
    key = rng.integers(keys.start, keys.stop, size=n)
    val = rng.integers(values.start, values.stop, size=n)
    rows = np.arange(n)
    inputs[rows, depth] = key
    inputs[rows, depth + 1] = val
    inputs[:, length] = key
    targets = np.full((n, length + 1), IGNORE)
    targets[:, length] = val
    return inputs, targets, depth


_WORDS = ("the", "a", "cat", "dog", "bird", "sees", "likes", "runs", "sleeps", "big",
          "small", "red", "old", "and", "near", "over")
_GRAMMAR = {
    "S": [["NP", "VP", "."]],
    "NP": [["DET", "N"], ["DET", "ADJ", "N"]],
    "VP": [["V", "NP"], ["VI"], ["V", "NP", "CONJ", "VP"]],
    "DET": [["the"], ["a"]],
    "N": [["cat"], ["dog"], ["bird"]],
    "ADJ": [["big"], ["small"], ["red"], ["old"]],
    "V": [["sees"], ["likes"]],
    "VI": [["runs"], ["sleeps"]],
    "CONJ": [["and"]],
}
CHARS = " ." + string.ascii_lowercase


def _expand(rng, symbol: str, depth: int = 0) -> list[str]:
    if symbol not in _GRAMMAR:
        return [symbol]
    options = _GRAMMAR[symbol]
    if depth > 4:  # cut recursion
        options = options[:1]
    choice = options[rng.integers(len(options))]
    return [w for part in choice for w in _expand(rng, part, depth + 1)]


def char_text(rng, n_chars: int) -> str:
    out = ""
    while len(out) < n_chars:
        out += " ".join(_expand(rng, "S")).replace(" .", ".") + " "
    return out[:n_chars]


def _char_lm(rng, spec: TaskSpec, n: int):
    if spec.vocab_size < N_SPECIAL + len(CHARS):
        raise ContractError(f"char-lm needs vocab >= {N_SPECIAL + len(CHARS)}")
    table = {c: N_SPECIAL + i for i, c in enumerate(CHARS)}
    seqs = np.array([[table[c] for c in char_text(rng, spec.seq_len + 1)] for _ in range(n)])
    return seqs[:, :-1], seqs[:, 1:].copy()


_BUILDERS = {"copy": _copy, "mqar": _mqar, "char-lm": _char_lm}


# --- public API --------------------------------------------------------------

def gen_copy(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    inputs, targets = _copy(_rng(spec.seed), spec, 1)
    return inputs[0], targets[0]


def gen_mqar(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    inputs, targets = _mqar(_rng(spec.seed), spec, 1)
    return inputs[0], targets[0]


def gen_sniah_toy(spec: TaskSpec, min_gap: int = 0) -> tuple[np.ndarray, np.ndarray, int]:
    inputs, targets, depth = _sniah(_rng(spec.seed), spec, 1, min_gap)
    return inputs[0], targets[0], int(depth[0])


def gen_char_lm(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    inputs, targets = _char_lm(_rng(spec.seed), spec, 1)
    return inputs[0], targets[0]


def make_batch(
    spec: TaskSpec, batch_size: int, index: int, split: str = "train", min_gap: int = 0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch ``index`` of a split as (inputs, targets) int64 tensors."""
    rng = _rng(spec.seed, split, index)
    if spec.task == "sniah-toy":
        inputs, targets, _ = _sniah(rng, spec, batch_size, min_gap)
    else:
        inputs, targets = _BUILDERS[spec.task](rng, spec, batch_size)
    return torch.as_tensor(inputs, dtype=torch.long), torch.as_tensor(targets, dtype=torch.long)


def with_seed(spec: TaskSpec, seed: int) -> TaskSpec:
    return dataclasses.replace(spec, seed=seed)


# --- oracles and scoring ----------------------------------------------------

def accuracy(predictions, targets) -> float:
    """Fraction of scored positions where ``predictions`` equals ``targets``."""
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    scored = targets != IGNORE
    if not scored.any():
        return float("nan")
    return float((predictions[scored] == targets[scored]).mean())


def copy_oracle(inputs) -> np.ndarray:
    """Perfect copier: position ``m + j`` predicts symbol ``j``."""
    inputs = np.asarray(inputs)
    m = inputs.shape[-1] // 2
    pred = np.full(inputs.shape, PAD)
    pred[..., m:] = inputs[..., :m]
    return pred


def recall_oracle(inputs, n_pairs: int) -> np.ndarray:
    """Exact key-value lookup for MQAR rows."""
    inputs = np.atleast_2d(np.asarray(inputs))
    pred = np.full(inputs.shape, PAD)
    for r, row in enumerate(inputs):
        table = dict(zip(row[0 : 2 * n_pairs : 2], row[1 : 2 * n_pairs : 2]))
        for t in range(2 * n_pairs, len(row)):
            pred[r, t] = table.get(row[t], PAD)
    return pred


def random_oracle(targets, alphabet, seed: int = 0) -> np.ndarray:
    """Guesses drawn uniformly from ``alphabet`` (input-blind baseline)."""
    rng = np.random.default_rng(seed)
    alphabet = np.asarray(list(alphabet))
    return alphabet[rng.integers(0, len(alphabet), size=np.shape(targets))]


def chance_band(p: float, n: int, sigmas: float = 3.0) -> tuple[float, float]:
    """``p +/- sigmas * sqrt(p (1 - p) / n)``: the binomial spread of an accuracy."""
    half = sigmas * np.sqrt(p * (1 - p) / n)
    return p - half, p + half
