"""Teacher-to-student layer mappings for each distillation strategy.

Three ways to decide which teacher layers a student layer learns from:
random per-epoch selection, fixed deterministic mappings (evenly strided
"skip" or final-layers "last"), and attention weighting over all teacher
intermediates. Layer indices are 1-based; index ranges always exclude each
model's final layer, so a teacher with n layers offers n-1 candidates and a
student with m layers exposes m-1 targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

SCHEMES = ("skip", "last", "custom")


@dataclass(frozen=True)
class LayerSelection:
    """One epoch's random draw of teacher layers, plus how it was drawn."""

    teacher_indices: tuple
    epoch: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.teacher_indices)
        object.__setattr__(self, "teacher_indices", idx)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError(f"selection must be strictly increasing, got {idx}")
        if idx and idx[0] < 1:
            raise ConfigError(f"layer indices are 1-based, got {idx}")

    def to_record(self) -> dict:
        """JSON-line payload for the run manifest."""
        return {"epoch": self.epoch, "indices": list(self.teacher_indices), "seed": self.seed}


@dataclass(frozen=True)
class FixedMapping:
    """Deterministic (student_layer, teacher_layer) pairs."""

    pairs: tuple
    scheme: str = "custom"

    def __post_init__(self) -> None:
        pairs = tuple((int(s), int(t)) for s, t in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        students = [s for s, _ in pairs]
        if students != list(range(1, len(pairs) + 1)):
            raise ConfigError(f"student layers must be exactly 1..{len(pairs)}, got {students}")
        teachers = [t for _, t in pairs]
        if any(b <= a for a, b in zip(teachers, teachers[1:])):
            raise ConfigError(f"teacher layers must be strictly increasing, got {teachers}")

    def teacher_indices(self) -> tuple:
        return tuple(t for _, t in self.pairs)


@dataclass(frozen=True)
class AlpWeights:
    """Row-stochastic attention of student layers over teacher layers."""

    weights: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2:
            raise ShapeError(f"weights must be a 2-d matrix, got shape {w.shape}")
        if (w < 0).any():
            raise ConfigError("attention weights must be non-negative")
        row_sums = w.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > 1e-9:
            raise ConfigError(f"attention rows must sum to 1, got sums {row_sums}")


def selection_rng(seed: int, epoch: int) -> np.random.Generator:
    """Counter-based generator for one epoch's draw.

    Philox is keyed with seed XOR epoch so every epoch gets an independent,
    platform-reproducible stream while the whole run stays a function of one
    seed.
    """
    return np.random.Generator(np.random.Philox(key=seed ^ epoch))


def random_select(
    n_intermediate: int,
    k: int,
    rng: np.random.Generator,
    *,
    epoch: int = 0,
    seed: int = 0,
) -> LayerSelection:
    """Draw k distinct teacher layers uniformly from [1, n_intermediate], sorted."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > n_intermediate:
        raise ConfigError(
            f"cannot select {k} layers from {n_intermediate} teacher intermediates"
        )
    draw = rng.choice(np.arange(1, n_intermediate + 1), size=k, replace=False)
    return LayerSelection(tuple(sorted(int(i) for i in draw)), epoch=epoch, seed=seed)


def select_for_epoch(n_intermediate: int, k: int, seed: int, epoch: int) -> LayerSelection:
    """Per-epoch draw under the seed-XOR-epoch schedule."""
    return random_select(n_intermediate, k, selection_rng(seed, epoch), epoch=epoch, seed=seed)


def fixed_mapping(n_intermediate: int, m_intermediate: int, scheme: str) -> FixedMapping:
    """Deterministic mapping of m student layers onto n teacher intermediates.

    skip: evenly strided teacher layers, stride floor((n+1)/(m+1));
    last: the final m teacher intermediates.
    """
    if m_intermediate < 1 or n_intermediate < 1:
        raise ConfigError("layer counts must be >= 1")
    if m_intermediate > n_intermediate:
        raise ConfigError(
            f"student has {m_intermediate} intermediates but teacher only {n_intermediate}"
        )
    if scheme == "skip":
        stride = (n_intermediate + 1) // (m_intermediate + 1)
        teachers = [stride * j for j in range(1, m_intermediate + 1)]
    elif scheme == "last":
        teachers = list(range(n_intermediate - m_intermediate + 1, n_intermediate + 1))
    else:
        raise ConfigError(f"unknown mapping scheme {scheme!r} (expected skip or last)")
    return FixedMapping(tuple(zip(range(1, m_intermediate + 1), teachers)), scheme=scheme)


def alp_attention(student_pooled: np.ndarray, teacher_pooled: np.ndarray) -> AlpWeights:
    """Dot-product attention of each student layer over all teacher layers.

    Inputs are mean-pooled, linearly projected layer representations in a
    shared width u. Returns one row per student layer; rows sum to 1.
    """
    s = np.asarray(student_pooled, dtype=np.float64)
    t = np.asarray(teacher_pooled, dtype=np.float64)
    if s.ndim != 2 or t.ndim != 2:
        raise ShapeError(f"pooled inputs must be 2-d, got {s.shape} and {t.shape}")
    if s.shape[1] != t.shape[1]:
        raise ShapeError(
            f"projection widths disagree: student {s.shape[1]} vs teacher {t.shape[1]}"
        )
    scores = s @ t.T
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return AlpWeights(e / e.sum(axis=1, keepdims=True))
