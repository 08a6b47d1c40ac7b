"""Metrics, the cross-validated experiment runner, and result reporting."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from amnet.dataio import FoldSplit, TaskInstance, TaskKind, split_folds
from amnet.encoder import EncoderConfig
from amnet.errors import ConfigError, DataError
from amnet.features import ExerciseVocab
from amnet.model import ModelParams
from amnet.training import TrainConfig, encode_instance, finetune, predict

MIN_INSTANCES = 5


def mae(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"mae needs two equal-length 1-d inputs, got {p.shape} and {t.shape}")
    if p.size == 0:
        raise ValueError("mae of an empty set is undefined")
    return float(np.mean(np.abs(p - t)))


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of ROC AUC; tied scores earn half credit."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"auc needs two equal-length 1-d inputs, got {s.shape} and {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("auc labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc is undefined when only one class is present")
    rank_sum = float(rankdata(s)[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def metric_for(kind: TaskKind) -> tuple[str, callable, bool]:
    """(name, function, higher_is_better) used to score a task."""
    if kind.is_regression:
        return "mae", mae, False
    return "auc", lambda p, y: auc(p, y.astype(int)), True


@dataclass
class ExperimentResult:
    task: str
    metric_name: str
    fold_values: list[float]
    seed: int
    mask_spec: dict | None = None
    checkpoint_digest: str | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_values))

    @property
    def std(self) -> float:
        # sample standard deviation over folds
        return float(np.std(self.fold_values, ddof=1)) if len(self.fold_values) > 1 else 0.0

    def summary(self) -> str:
        return f"{self.mean:.4f}±{self.std:.4f}"

    def fold_records(self) -> list[dict]:
        return [
            {
                "task": self.task,
                "mask_spec": self.mask_spec,
                "fold": k,
                "metric_name": self.metric_name,
                "value": v,
                "seed": self.seed,
                "checkpoint_digest": self.checkpoint_digest,
            }
            for k, v in enumerate(self.fold_values)
        ]


# -- cross-validation ---------------------------------------------------------------


def check_compatible(base: ModelParams, config: EncoderConfig) -> None:
    have = base.config
    for name in ("d_model", "input_length", "n_blocks", "n_heads", "ffn_hidden"):
        if getattr(have, name) != getattr(config, name):
            raise ConfigError(
                f"checkpoint {name}={getattr(have, name)} does not match requested {name}={getattr(config, name)}"
            )


def reinit_mismatched(base: ModelParams, config: EncoderConfig, seed: int) -> ModelParams:
    """Fresh parameters for ``config`` that keep every checkpoint tensor whose shape still fits."""
    fresh = ModelParams.init(config, base.vocab, np.random.default_rng([seed, 0xC0FFEE]))
    old = base.named_parameters()
    for name, t in fresh.named_parameters().items():
        if name in old and old[name].shape == t.shape:
            t.data = old[name].data.copy()
    return fresh


def _run_fold(base, fold: FoldSplit, instances, kind, train_config, seed) -> float:
    name, fn, higher = metric_for(kind)
    train = [instances[i] for i in fold.train]
    val = [instances[i] for i in fold.validation]
    test = [instances[i] for i in fold.test]
    result = finetune(base, train, val, kind, train_config, seed * 1000 + fold.fold_id, fn, higher)
    seqs = [encode_instance(i, result.params.vocab) for i in test]
    return float(fn(predict(result.params, seqs, kind), np.array([i.label for i in test])))


def run_cv(
    instances: Sequence[TaskInstance],
    kind: TaskKind,
    seed: int,
    base: ModelParams | None = None,
    config: EncoderConfig | None = None,
    train_config: TrainConfig | None = None,
    vocab: ExerciseVocab | None = None,
    checkpoint_digest: str | None = None,
    mask_spec: dict | None = None,
    jobs: int = 1,
) -> ExperimentResult:
    """Five-fold fine-tune/select/test protocol.

    With ``base`` the folds start from those weights; without it they start
    from a random initialisation of ``config`` (the no-pretrain baseline).
    Fold k trains on three shards, early-stops on shard k+1 and is scored
    once on shard k.
    """
    if len(instances) < MIN_INSTANCES:
        raise DataError(f"cross-validation needs at least {MIN_INSTANCES} instances, got {len(instances)}")
    train_config = train_config or TrainConfig()
    if base is None:
        if config is None:
            raise ConfigError("an encoder config is required when no checkpoint is given")
        if vocab is None:
            ids = [it.exercise_id for inst in instances for it in inst.input]
            ids += [inst.target.exercise_id for inst in instances if inst.target is not None]
            vocab = ExerciseVocab(ids)
        base = ModelParams.init(config, vocab, np.random.default_rng([seed, 0xC0FFEE]))
    elif config is not None:
        check_compatible(base, config)
    folds = split_folds(instances, seed)
    args = [(base, f, instances, kind, train_config, seed) for f in folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_run_fold, *zip(*args)))
    else:
        values = [_run_fold(*a) for a in args]
    name, _, _ = metric_for(kind)
    meta = {"n_instances": len(instances), "encoder": base.config.to_dict(), "train": train_config.to_dict()}
    return ExperimentResult(kind.value, name, values, seed, mask_spec, checkpoint_digest, meta)


# -- reporting ------------------------------------------------------------------------


def write_results(results: Sequence[ExperimentResult], path: str | Path) -> None:
    """One JSON object per fold, in result then fold order."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            for rec in r.fold_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_results(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def results_from_records(records: Sequence[dict]) -> list[ExperimentResult]:
    """Regroup fold records into results, keyed by everything except fold and value."""
    groups: dict[str, ExperimentResult] = {}
    for rec in records:
        key = json.dumps({k: v for k, v in rec.items() if k not in ("fold", "value")}, sort_keys=True)
        if key not in groups:
            groups[key] = ExperimentResult(
                rec["task"], rec["metric_name"], [], rec["seed"], rec["mask_spec"], rec["checkpoint_digest"]
            )
        groups[key].fold_values.append(rec["value"])
    return list(groups.values())


def label_for(r: ExperimentResult) -> str:
    if r.mask_spec is None or r.checkpoint_digest is None:
        return "no-pretrain"
    return "+".join(r.mask_spec["predict_features"])


def write_summary(results: Sequence[ExperimentResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("task", "targets", "metric_name", "seed", "n_folds", "mean", "std"))
        for r in results:
            w.writerow((r.task, label_for(r), r.metric_name, r.seed, len(r.fold_values), repr(r.mean), repr(r.std)))


def format_table(results: Sequence[ExperimentResult]) -> str:
    """Fixed-width comparison table, one row per result."""
    rows = [("task", "targets", "metric", "seed", "mean±std", "folds")]
    for r in results:
        folds = " ".join(f"{v:.4f}" for v in r.fold_values)
        rows.append((r.task, label_for(r), r.metric_name, str(r.seed), r.summary(), folds))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def is_finite_result(r: ExperimentResult) -> bool:
    return all(math.isfinite(v) for v in r.fold_values)
