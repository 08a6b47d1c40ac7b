"""Interaction embeddings and assessment masking.

An interaction at position t is embedded as

    exercise row + part row + positional encoding(t)
    + correctness row + norm_elapsed * elapsed vector + norm_inactive * inactive vector

When the position is selected for masking, the assessment terms named in the
MaskSpec's mask set are dropped and the trainable mask vector is added
instead.  Timeliness has no input embedding; it is a prediction target only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from amnet import numerics as nx
from amnet.dataio import N_PARTS, ExerciseRef, Interaction
from amnet.errors import ConfigError, DataError, DomainError
from amnet.numerics import Tensor

CORRECTNESS = "correctness"
TIMELINESS = "timeliness"
ELAPSED_TIME = "elapsed_time"
INACTIVE_TIME = "inactive_time"
FEATURES = (CORRECTNESS, TIMELINESS, ELAPSED_TIME, INACTIVE_TIME)
BINARY_FEATURES = frozenset({CORRECTNESS, TIMELINESS})

ELAPSED_CAP_S = 300.0
INACTIVE_CAP_S = 86400.0
INIT_STD = 0.02


def normalize_elapsed(elapsed_time_s: float) -> float:
    if elapsed_time_s < 0:
        raise DomainError(f"elapsed time must be nonnegative, got {elapsed_time_s}")
    return min(elapsed_time_s, ELAPSED_CAP_S) / ELAPSED_CAP_S


def normalize_inactive(inactive_time_s: float) -> float:
    if inactive_time_s < 0:
        raise DomainError(f"inactive time must be nonnegative, got {inactive_time_s}")
    return min(inactive_time_s, INACTIVE_CAP_S) / INACTIVE_CAP_S


def positional_encoding(t: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: sin on even entries, cos on odd, shared frequency per pair."""
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = t / np.power(10000.0, i2 / d_model)
    out = np.empty(d_model)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle[: d_model // 2])
    return out


@lru_cache(maxsize=16)
def positional_table(length: int, d_model: int) -> np.ndarray:
    table = np.stack([positional_encoding(t, d_model) for t in range(length)])
    table.setflags(write=False)
    return table


@dataclass(frozen=True)
class MaskSpec:
    """Selection rate plus which features get hidden and which get predicted."""

    selection_rate: float = 0.6
    mask_features: frozenset[str] = frozenset({CORRECTNESS, TIMELINESS, ELAPSED_TIME})
    predict_features: frozenset[str] = frozenset({CORRECTNESS, TIMELINESS})

    def __post_init__(self):
        object.__setattr__(self, "mask_features", frozenset(self.mask_features))
        object.__setattr__(self, "predict_features", frozenset(self.predict_features))
        if not 0.0 < self.selection_rate <= 1.0:
            raise ConfigError(f"selection rate must be in (0, 1], got {self.selection_rate}")
        unknown = (self.mask_features | self.predict_features) - set(FEATURES)
        if unknown:
            raise ConfigError(f"unknown features {sorted(unknown)}; valid: {', '.join(FEATURES)}")
        if not self.mask_features:
            raise ConfigError("mask_features must not be empty")
        if not self.predict_features:
            raise ConfigError("predict_features must not be empty")
        if not self.predict_features <= self.mask_features:
            extra = sorted(self.predict_features - self.mask_features)
            raise ConfigError(f"predict features {extra} are not in the mask set")

    @classmethod
    def for_targets(cls, targets: Iterable[str], selection_rate: float = 0.6) -> "MaskSpec":
        """Mask set that hides everything a target could be read off from.

        Timeliness is a threshold on elapsed time, so predicting it also
        hides elapsed time.
        """
        targets = frozenset(targets)
        masked = set(targets)
        if TIMELINESS in targets:
            masked.add(ELAPSED_TIME)
        return cls(selection_rate, frozenset(masked), targets)

    def ordered_predict(self) -> tuple[str, ...]:
        return tuple(f for f in FEATURES if f in self.predict_features)

    def to_dict(self) -> dict:
        return {
            "selection_rate": self.selection_rate,
            "mask_features": [f for f in FEATURES if f in self.mask_features],
            "predict_features": list(self.ordered_predict()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        return cls(float(d["selection_rate"]), frozenset(d["mask_features"]), frozenset(d["predict_features"]))


class ExerciseVocab:
    """Maps exercise ids to embedding rows; unseen ids share one extra row."""

    def __init__(self, ids: Iterable[str]):
        self.ids = tuple(sorted(set(ids)))
        self._rows = {e: k for k, e in enumerate(self.ids)}

    @property
    def unknown_row(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids) + 1

    def row(self, exercise_id: str) -> int:
        return self._rows.get(exercise_id, self.unknown_row)

    @classmethod
    def from_interactions(cls, sequences: Iterable[Iterable[Interaction]]) -> "ExerciseVocab":
        return cls(it.exercise_id for seq in sequences for it in seq)


@dataclass
class EmbeddingTables:
    exercise: Tensor
    part: Tensor
    correctness: Tensor
    elapsed: Tensor
    inactive: Tensor
    mask: Tensor
    pad: Tensor

    @classmethod
    def init(cls, n_exercise_rows: int, d_model: int, rng: np.random.Generator) -> "EmbeddingTables":
        def normal(*shape):
            return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

        return cls(
            exercise=normal(n_exercise_rows, d_model),
            part=normal(N_PARTS, d_model),
            correctness=normal(2, d_model),
            elapsed=normal(d_model),
            inactive=normal(d_model),
            mask=normal(d_model),
            pad=Tensor(np.zeros(d_model), requires_grad=False),
        )

    def named(self) -> dict[str, Tensor]:
        return {
            "emb.exercise": self.exercise,
            "emb.part": self.part,
            "emb.correctness": self.correctness,
            "emb.elapsed": self.elapsed,
            "emb.inactive": self.inactive,
            "emb.mask": self.mask,
            "emb.pad": self.pad,
        }

    @property
    def d_model(self) -> int:
        return self.mask.shape[0]


def embed_interaction(
    it: Interaction | ExerciseRef,
    t: int,
    tables: EmbeddingTables,
    vocab: ExerciseVocab,
    masked: bool,
    spec: MaskSpec | None,
) -> np.ndarray:
    """Embedding of a single interaction (reference path, no tape).

    An ExerciseRef stands for a target exercise whose assessments are unknown:
    all assessment terms are replaced by the mask vector.
    """
    if it.part not in range(1, N_PARTS + 1):
        raise DomainError(f"part must be in 1..7, got {it.part}")
    d = tables.d_model
    out = tables.exercise.data[vocab.row(it.exercise_id)] + tables.part.data[it.part - 1]
    out = out + positional_encoding(t, d)
    if isinstance(it, ExerciseRef):
        return out + tables.mask.data
    hidden = spec.mask_features if (masked and spec is not None) else frozenset()
    if CORRECTNESS not in hidden:
        out = out + tables.correctness.data[it.correctness]
    if ELAPSED_TIME not in hidden:
        out = out + normalize_elapsed(it.elapsed_time_s) * tables.elapsed.data
    if INACTIVE_TIME not in hidden:
        out = out + normalize_inactive(it.inactive_time_s) * tables.inactive.data
    if masked:
        out = out + tables.mask.data
    return out


@dataclass
class SequenceArrays:
    """Column view of one interaction sequence, ready for batching.

    ``hidden`` marks positions whose assessments are unknown (a review
    target); they are embedded as fully masked.
    """

    exercise: np.ndarray
    part: np.ndarray
    correctness: np.ndarray
    timeliness: np.ndarray
    elapsed: np.ndarray
    inactive: np.ndarray
    hidden: np.ndarray

    def __len__(self) -> int:
        return len(self.exercise)

    def select(self, keep: np.ndarray) -> "SequenceArrays":
        return SequenceArrays(*(getattr(self, f)[keep] for f in _ARRAY_FIELDS))

    def tail(self, n: int) -> "SequenceArrays":
        if len(self) <= n:
            return self
        return SequenceArrays(*(getattr(self, f)[len(self) - n :] for f in _ARRAY_FIELDS))

    def slice(self, start: int, stop: int) -> "SequenceArrays":
        return SequenceArrays(*(getattr(self, f)[start:stop] for f in _ARRAY_FIELDS))

    @staticmethod
    def concat(parts: Sequence["SequenceArrays"]) -> "SequenceArrays":
        return SequenceArrays(*(np.concatenate([getattr(p, f) for p in parts]) for f in _ARRAY_FIELDS))


_ARRAY_FIELDS = ("exercise", "part", "correctness", "timeliness", "elapsed", "inactive", "hidden")


def encode_sequence(
    interactions: Sequence[Interaction], vocab: ExerciseVocab, target: ExerciseRef | None = None
) -> SequenceArrays:
    """Convert interactions (and an optional trailing target exercise) to arrays."""
    n = len(interactions) + (target is not None)
    ex = np.empty(n, dtype=np.intp)
    part = np.empty(n, dtype=np.intp)
    corr = np.zeros(n, dtype=np.intp)
    timely = np.zeros(n)
    elapsed = np.zeros(n)
    inactive = np.zeros(n)
    hidden = np.zeros(n, dtype=bool)
    for k, it in enumerate(interactions):
        ex[k] = vocab.row(it.exercise_id)
        part[k] = it.part - 1
        corr[k] = it.correctness
        timely[k] = it.timeliness
        elapsed[k] = normalize_elapsed(it.elapsed_time_s)
        inactive[k] = normalize_inactive(it.inactive_time_s)
    if target is not None:
        if target.part not in range(1, N_PARTS + 1):
            raise DomainError(f"part must be in 1..7, got {target.part}")
        ex[-1] = vocab.row(target.exercise_id)
        part[-1] = target.part - 1
        hidden[-1] = True
    return SequenceArrays(ex, part, corr, timely, elapsed, inactive, hidden)


@dataclass
class EmbeddedBatch:
    embeddings: Tensor  # B x T x d
    pad_mask: np.ndarray  # B x T, True at padding
    loss_flags: np.ndarray  # B x T, True where a masked assessment is predicted
    targets: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    @property
    def n_masked(self) -> int:
        return int(self.loss_flags.sum())


def _stack(seqs: Sequence[SequenceArrays], width: int, name: str, dtype) -> np.ndarray:
    out = np.zeros((len(seqs), width), dtype=dtype)
    for b, s in enumerate(seqs):
        out[b, : len(s)] = getattr(s, name)
    return out


def embed_sequences(
    seqs: Sequence[SequenceArrays],
    tables: EmbeddingTables,
    masked: np.ndarray | None,
    spec: MaskSpec | None,
    width: int | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Differentiable batched embedding of right-padded sequences.

    ``masked`` is a B x width boolean array of positions selected for
    masking.  Feature values that the model must not see (masked features,
    padding) are zeroed before lookup, so they cannot influence the result.
    """
    if width is None:
        width = max(len(s) for s in seqs)
    B, d = len(seqs), tables.d_model
    lengths = np.array([len(s) for s in seqs])
    pad = np.arange(width)[None, :] >= lengths[:, None]
    keep = ~pad
    hidden = _stack(seqs, width, "hidden", bool)
    if masked is None:
        masked = np.zeros((B, width), dtype=bool)
    masked = masked & keep
    hide_all = hidden | pad
    mask_set = spec.mask_features if spec is not None else frozenset()

    def visible(name):
        hide = hide_all | (masked & (name in mask_set))
        return ~hide

    ex = _stack(seqs, width, "exercise", np.intp) * keep
    part = _stack(seqs, width, "part", np.intp) * keep
    corr_vis = visible(CORRECTNESS)
    corr = _stack(seqs, width, "correctness", np.intp) * corr_vis
    elapsed = _stack(seqs, width, "elapsed", np.float64) * visible(ELAPSED_TIME)
    inactive = _stack(seqs, width, "inactive", np.float64) * visible(INACTIVE_TIME)
    mask_on = (masked | hidden) & keep

    x = nx.add(nx.embedding(tables.exercise, ex), nx.embedding(tables.part, part))
    x = nx.add(x, positional_table(width, d)[None, :, :] * keep[:, :, None])
    x = nx.add(x, nx.mul(nx.embedding(tables.correctness, corr), corr_vis[:, :, None].astype(np.float64)))
    x = nx.add(x, nx.mul(elapsed[:, :, None], tables.elapsed))
    x = nx.add(x, nx.mul(inactive[:, :, None], tables.inactive))
    x = nx.add(x, nx.mul(mask_on[:, :, None].astype(np.float64), tables.mask))
    x = nx.mul(x, keep[:, :, None].astype(np.float64))
    x = nx.add(x, nx.mul(pad[:, :, None].astype(np.float64), tables.pad))
    return x, pad


def choose_masked(length: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly floor(rate * length) distinct positions, uniformly at random."""
    k = math.floor(rate * length + 1e-9)
    return rng.choice(length, size=k, replace=False)


def build_pretrain_batch(
    windows: Sequence[SequenceArrays],
    spec: MaskSpec,
    tables: EmbeddingTables,
    rng: np.random.Generator,
    max_length: int = 100,
) -> EmbeddedBatch:
    """Mask each window and embed the batch; empty windows are skipped and counted."""
    seqs = [w for w in windows if len(w) > 0]
    skipped = len(windows) - len(seqs)
    if not seqs:
        raise DataError("every window in the batch is empty")
    for s in seqs:
        if len(s) > max_length:
            raise DataError(f"window of length {len(s)} exceeds input length {max_length}")
    width = max(len(s) for s in seqs)
    flags = np.zeros((len(seqs), width), dtype=bool)
    for b, s in enumerate(seqs):
        flags[b, choose_masked(len(s), spec.selection_rate, rng)] = True
    emb, pad = embed_sequences(seqs, tables, flags, spec, width)
    targets = {}
    source = {
        CORRECTNESS: "correctness",
        TIMELINESS: "timeliness",
        ELAPSED_TIME: "elapsed",
        INACTIVE_TIME: "inactive",
    }
    for f in spec.ordered_predict():
        targets[f] = _stack(seqs, width, source[f], np.float64) * flags
    return EmbeddedBatch(emb, pad, flags, targets, skipped)
