"""Pre-training and fine-tuning loops, Adam, and the Noam learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from amnet import numerics as nx
from amnet.dataio import StudentTimeline, TaskInstance, TaskKind
from amnet.encoder import EncoderConfig, encode
from amnet.errors import ConfigError, DataError, DomainError, NumericError
from amnet.features import (
    BINARY_FEATURES,
    EmbeddedBatch,
    ExerciseVocab,
    MaskSpec,
    SequenceArrays,
    build_pretrain_batch,
    encode_sequence,
)
from amnet.model import ModelParams, finetune_logits
from amnet.numerics import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    peak_lr: float = 1e-3
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_epochs: int = 10
    pretrain_steps: int | None = None  # overrides pretrain_epochs when set
    normalize_loss: bool = True
    finetune_epochs: int = 100
    finetune_warmup_steps: int = 4000
    finetune_peak_lr: float = 1e-3
    patience: int = 5
    augment: bool = True

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.warmup_steps <= 0 or self.finetune_warmup_steps <= 0:
            raise ConfigError("warmup steps must be positive")
        if self.patience <= 0:
            raise ConfigError("patience must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# -- schedule and optimizer ---------------------------------------------------


def noam_lr(step: int, d_model: int = 256, warmup: int = 4000, peak_lr: float | None = 1e-3) -> float:
    """Linear warmup to ``warmup`` then inverse-square-root decay.

    With ``peak_lr`` set, the curve is scaled so that lr(warmup) == peak_lr;
    otherwise the classic d_model**-0.5 factor is used.
    """
    if step < 1:
        raise DomainError(f"step must be >= 1, got {step}")
    shape = min(step**-0.5, step * warmup**-1.5)
    if peak_lr is None:
        return d_model**-0.5 * shape
    return peak_lr * shape / warmup**-0.5


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping.

    Parameters without a gradient this step are left untouched.
    """

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: dict[str, Tensor], state: Adam, lr: float) -> None:
    """Functional spelling of ``state.step(lr)`` for callers holding both."""
    if state.params is not params:
        state.params = params
    state.step(lr)


# -- losses ---------------------------------------------------------------------


def pretrain_loss(
    h: Tensor,
    heads: dict[str, tuple[Tensor, Tensor]],
    batch: EmbeddedBatch,
    normalize: bool = True,
) -> Tensor:
    """Masked-assessment loss over the flagged positions only.

    BCE for binary targets, squared error for continuous ones, summed over
    features.  With ``normalize`` the total is divided by the number of
    masked positions.
    """
    flags = batch.loss_flags
    n = int(flags.sum())
    if n == 0:
        raise DataError("degenerate batch: no masked positions carry loss")
    B, T, d = h.shape
    rows = np.flatnonzero(flags.reshape(-1))
    picked = nx.take(nx.reshape(h, (B * T, d)), rows)
    total = None
    for f, target in batch.targets.items():
        w, b = heads[f]
        z = nx.add(nx.matmul(picked, w), b)
        y = target.reshape(-1)[rows].reshape(n, 1)
        term = nx.bce_with_logits(z, y) if f in BINARY_FEATURES else nx.mse(z, y)
        total = term if total is None else nx.add(total, term)
    if total is None:
        raise ConfigError("batch carries no prediction targets")
    return total if normalize else nx.scale(total, float(n))


def pretrain_predictions(h: Tensor, heads, feature: str) -> np.ndarray:
    """Per-position head outputs (probabilities for binary features)."""
    w, b = heads[feature]
    z = h.data @ w.data + b.data
    return nx._sigmoid(z[..., 0]) if feature in BINARY_FEATURES else z[..., 0]


# -- data preparation ---------------------------------------------------------


def make_windows(
    timelines: Sequence[StudentTimeline], vocab: ExerciseVocab, length: int = 100
) -> list[SequenceArrays]:
    """Split each timeline into consecutive non-overlapping windows."""
    out = []
    for tl in timelines:
        arr = encode_sequence(tl.interactions, vocab)
        for start in range(0, len(arr), length):
            out.append(arr.slice(start, start + length))
    return out


def _subsequence_keep(n: int, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(n) < 0.5
    if n and not keep.any():
        keep = rng.random(n) < 0.5
    return keep


def augment_subsequence(instance: TaskInstance, rng: np.random.Generator) -> TaskInstance:
    """Keep each input interaction independently with probability 1/2.

    An empty draw is retried once and then accepted.  The label and any
    target exercise carry over unchanged.
    """
    if not instance.input:
        return instance
    keep = _subsequence_keep(len(instance.input), rng)
    return replace(instance, input=tuple(it for it, k in zip(instance.input, keep) if k))


def augment_arrays(seq: SequenceArrays, rng: np.random.Generator) -> SequenceArrays:
    """Array form of ``augment_subsequence``; a trailing target position is always kept."""
    n_inputs = len(seq) - int(seq.hidden[-1]) if len(seq) else 0
    if n_inputs == 0:
        return seq
    keep = np.ones(len(seq), dtype=bool)
    keep[:n_inputs] = _subsequence_keep(n_inputs, rng)
    return seq.select(keep)


def encode_instance(instance: TaskInstance, vocab: ExerciseVocab) -> SequenceArrays:
    return encode_sequence(instance.input, vocab, instance.target)


def scale_label(label: float, kind: TaskKind) -> float:
    lo, hi = kind.label_range
    return (label - lo) / (hi - lo)


def unscale_prediction(p: np.ndarray, kind: TaskKind) -> np.ndarray:
    lo, hi = kind.label_range
    return lo + (hi - lo) * p


# -- pre-training -------------------------------------------------------------


@dataclass
class PretrainState:
    params: ModelParams
    optimizer: Adam
    spec: MaskSpec
    train_config: TrainConfig
    seed: int
    step: int = 0
    losses: list[float] = field(default_factory=list)


def _step_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def new_pretrain_state(
    corpus: Sequence[StudentTimeline],
    config: EncoderConfig,
    spec: MaskSpec,
    train_config: TrainConfig,
    seed: int,
) -> PretrainState:
    vocab = ExerciseVocab.from_interactions(tl.interactions for tl in corpus)
    params = ModelParams.init(config, vocab, _step_rng(seed, 0xC0FFEE), spec.ordered_predict())
    opt = Adam(params.trainable(), train_config.beta1, train_config.beta2, train_config.adam_eps)
    return PretrainState(params, opt, spec, train_config, seed)


def pretrain(
    corpus: Sequence[StudentTimeline],
    config: EncoderConfig,
    spec: MaskSpec,
    seed: int,
    train_config: TrainConfig | None = None,
    resume: PretrainState | None = None,
    until_step: int | None = None,
    on_step: Callable[[PretrainState], None] | None = None,
) -> PretrainState:
    """Masked-assessment pre-training.

    Every step draws its batch order, masks and dropout from streams seeded
    by (seed, epoch) and (seed, step), so a run resumed from a saved state
    replays exactly the losses of an uninterrupted run.
    """
    if not corpus:
        raise DataError("pre-training corpus is empty")
    if resume is None:
        train_config = train_config or TrainConfig()
        state = new_pretrain_state(corpus, config, spec, train_config, seed)
    else:
        state = resume
        train_config = state.train_config
        seed = state.seed
        spec = state.spec
    params = state.params
    config = params.config
    windows = make_windows(corpus, params.vocab, config.input_length)
    bs = train_config.batch_size
    per_epoch = math.ceil(len(windows) / bs)
    total = train_config.pretrain_steps or train_config.pretrain_epochs * per_epoch
    stop = total if until_step is None else min(total, until_step)
    order_epoch, order = -1, None
    while state.step < stop:
        epoch, k = divmod(state.step, per_epoch)
        if epoch != order_epoch:
            order = _step_rng(seed, 1, epoch).permutation(len(windows))
            order_epoch = epoch
        batch_windows = [windows[i] for i in order[k * bs : (k + 1) * bs]]
        rng = _step_rng(seed, 2, state.step)
        params.zero_grad()
        with Tape() as tape:
            batch = build_pretrain_batch(batch_windows, spec, params.tables, rng, config.input_length)
            h = _encode_batch(params, batch, True, rng)
            loss = pretrain_loss(h, params.pretrain_heads, batch, train_config.normalize_loss)
        nx.backward(loss, tape)
        lr = noam_lr(state.step + 1, config.d_model, train_config.warmup_steps, train_config.peak_lr)
        state.optimizer.step(lr)
        state.step += 1
        state.losses.append(loss.item())
        if not math.isfinite(state.losses[-1]):
            raise NumericError(f"pre-training loss became {state.losses[-1]} at step {state.step}")
        if state.step % 50 == 0:
            log.info("pretrain step %d/%d loss %.4f", state.step, total, state.losses[-1])
        if on_step is not None:
            on_step(state)
    return state


def _encode_batch(params: ModelParams, batch: EmbeddedBatch, training: bool, rng=None) -> Tensor:
    return encode(batch.embeddings, params.blocks, params.config, training, rng, batch.pad_mask)


def evaluate_pretrain_loss(
    params: ModelParams, windows: Sequence[SequenceArrays], spec: MaskSpec, seed: int, batch_size: int = 128
) -> float:
    """Mean masked loss on fixed masks, without dropout."""
    total, count = 0.0, 0
    for k in range(0, len(windows), batch_size):
        rng = _step_rng(seed, 3, k)
        batch = build_pretrain_batch(windows[k : k + batch_size], spec, params.tables, rng, params.config.input_length)
        h = _encode_batch(params, batch, False)
        n = batch.n_masked
        total += pretrain_loss(h, params.pretrain_heads, batch, True).item() * n
        count += n
    return total / count


# -- fine-tuning ----------------------------------------------------------------


def finetune_loss(logits: Tensor, targets: np.ndarray, kind: TaskKind) -> Tensor:
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if kind.is_regression:
        return nx.mse(nx.sigmoid(logits), y)
    return nx.bce_with_logits(logits, y)


def finetune_step(
    params: ModelParams,
    seqs: Sequence[SequenceArrays],
    labels: Sequence[float],
    kind: TaskKind,
    optimizer: Adam,
    lr: float,
    rng: np.random.Generator,
) -> float:
    """One Adam step on a batch; labels are raw task labels."""
    if params.finetune_head is None:
        raise ConfigError(f"model has no fine-tuning head for task {kind.value}")
    if not seqs:
        raise DataError("empty fine-tuning batch")
    targets = np.array([scale_label(y, kind) for y in labels])
    params.zero_grad()
    with Tape() as tape:
        logits = finetune_logits(params, seqs, training=True, rng=rng)
        loss = finetune_loss(logits, targets, kind)
    nx.backward(loss, tape)
    optimizer.step(lr)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"fine-tuning loss became {value}")
    return value


def predict(params: ModelParams, seqs: Sequence[SequenceArrays], kind: TaskKind, batch_size: int = 256) -> np.ndarray:
    """Predictions in label units (scores for regression, probabilities otherwise)."""
    out = []
    for k in range(0, len(seqs), batch_size):
        z = finetune_logits(params, seqs[k : k + batch_size]).data[:, 0]
        out.append(nx._sigmoid(z))
    p = np.concatenate(out) if out else np.zeros(0)
    return unscale_prediction(p, kind) if kind.is_regression else p


@dataclass
class FinetuneResult:
    params: ModelParams
    best_epoch: int
    best_score: float
    history: list[tuple[float, float]]  # (train loss, validation score) per epoch


def finetune(
    base: ModelParams,
    train: Sequence[TaskInstance],
    validation: Sequence[TaskInstance],
    kind: TaskKind,
    train_config: TrainConfig,
    seed: int,
    score_fn: Callable[[np.ndarray, np.ndarray], float],
    higher_is_better: bool,
) -> FinetuneResult:
    """Fine-tune a copy of ``base`` and keep the best-validating weights.

    Stops after ``patience`` consecutive epochs without validation
    improvement.
    """
    if not train:
        raise DataError("no training instances")
    for inst in list(train) + list(validation):
        if inst.task_kind is not kind:
            raise ConfigError(f"instance of task {inst.task_kind.value} given to a {kind.value} run")
    params = base.copy()
    targets = np.array([scale_label(i.label, kind) for i in train])
    prior = float(np.clip(targets.mean(), 1e-3, 1 - 1e-3))
    params.attach_finetune_head(bias=math.log(prior / (1 - prior)))
    opt = Adam(params.trainable(), train_config.beta1, train_config.beta2, train_config.adam_eps)
    train_seqs = [encode_instance(i, params.vocab) for i in train]
    val_seqs = [encode_instance(i, params.vocab) for i in validation]
    val_labels = np.array([i.label for i in validation])
    labels = [i.label for i in train]
    bs = train_config.batch_size
    cfg = params.config

    best = (-math.inf if higher_is_better else math.inf, -1, params.snapshot())
    history = []
    stale = 0
    step = 0
    for epoch in range(train_config.finetune_epochs):
        rng = _step_rng(seed, 5, epoch)
        order = rng.permutation(len(train_seqs))
        losses = []
        for k in range(0, len(order), bs):
            idx = order[k : k + bs]
            seqs = [train_seqs[i] for i in idx]
            if train_config.augment:
                seqs = [augment_arrays(s, rng) for s in seqs]
            step += 1
            lr = noam_lr(step, cfg.d_model, train_config.finetune_warmup_steps, train_config.finetune_peak_lr)
            losses.append(finetune_step(params, seqs, [labels[i] for i in idx], kind, opt, lr, rng))
        if val_seqs:
            score = score_fn(predict(params, val_seqs, kind), val_labels)
        else:
            # no validation split: select on training loss instead
            score = -float(np.mean(losses)) if higher_is_better else float(np.mean(losses))
        history.append((float(np.mean(losses)), score))
        improved = score > best[0] if higher_is_better else score < best[0]
        if improved:
            best = (score, epoch, params.snapshot())
            stale = 0
        elif step >= train_config.finetune_warmup_steps:
            # epochs during warmup do not count towards patience
            stale += 1
            if stale >= train_config.patience:
                break
    params.restore(best[2])
    return FinetuneResult(params, best[1], best[0], history)
