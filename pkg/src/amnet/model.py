"""All trainable state of the assessment model and its forward passes."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from amnet import numerics as nx
from amnet.encoder import BlockWeights, EncoderConfig, encode
from amnet.features import (
    EmbeddingTables,
    ExerciseVocab,
    MaskSpec,
    SequenceArrays,
    embed_sequences,
    FEATURES,
)
from amnet.numerics import Tensor

HEAD_INIT_STD = 0.02


class ModelParams:
    """Embedding tables, encoder blocks and whichever task heads are attached.

    Pre-training heads map each H_t to one feature; the fine-tuning head maps
    the flattened T x d_model matrix H to one output.  At most one kind is
    attached at a time.
    """

    def __init__(
        self,
        config: EncoderConfig,
        vocab: ExerciseVocab,
        tables: EmbeddingTables,
        blocks: list[BlockWeights],
        pretrain_heads: dict[str, tuple[Tensor, Tensor]] | None = None,
        finetune_head: tuple[Tensor, Tensor] | None = None,
    ):
        self.config = config
        self.vocab = vocab
        self.tables = tables
        self.blocks = blocks
        self.pretrain_heads = dict(pretrain_heads or {})
        self.finetune_head = finetune_head

    @classmethod
    def init(
        cls,
        config: EncoderConfig,
        vocab: ExerciseVocab,
        rng: np.random.Generator,
        predict_features: Sequence[str] = (),
    ) -> "ModelParams":
        tables = EmbeddingTables.init(len(vocab), config.d_model, rng)
        blocks = [BlockWeights.init(config, rng) for _ in range(config.n_blocks)]
        params = cls(config, vocab, tables, blocks)
        for f in FEATURES:
            if f in predict_features:
                params.pretrain_heads[f] = (
                    Tensor(rng.normal(0.0, HEAD_INIT_STD, size=(config.d_model, 1)), requires_grad=True),
                    Tensor(np.zeros(1), requires_grad=True),
                )
        return params

    def attach_finetune_head(self, bias: float = 0.0) -> None:
        """Drop the pre-training heads and add a fresh single-output head.

        The weight starts at zero so the first predictions equal the prior
        ``bias``; a random start over T * d_model unit-scale inputs would
        open with logits of order one.
        """
        width = self.config.input_length * self.config.d_model
        self.pretrain_heads = {}
        self.finetune_head = (
            Tensor(np.zeros((width, 1)), requires_grad=True),
            Tensor(np.array([bias]), requires_grad=True),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.tables.named())
        for k, w in enumerate(self.blocks):
            out.update(w.named(f"blocks.{k}"))
        for f, (w, b) in self.pretrain_heads.items():
            out[f"head.pretrain.{f}.w"] = w
            out[f"head.pretrain.{f}.b"] = b
        if self.finetune_head is not None:
            out["head.finetune.w"], out["head.finetune.b"] = self.finetune_head
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.named_parameters().items():
            v.data = snap[k].copy()

    def copy(self) -> "ModelParams":
        def clone(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        tables = EmbeddingTables(**{k: clone(v) for k, v in vars(self.tables).items()})
        blocks = [BlockWeights(**{k: clone(v) for k, v in vars(b).items()}) for b in self.blocks]
        heads = {f: (clone(w), clone(b)) for f, (w, b) in self.pretrain_heads.items()}
        ft = None if self.finetune_head is None else tuple(clone(t) for t in self.finetune_head)
        return ModelParams(self.config, self.vocab, tables, blocks, heads, ft)


def hidden_states(
    params: ModelParams,
    seqs: Sequence[SequenceArrays],
    masked: np.ndarray | None = None,
    spec: MaskSpec | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    width: int | None = None,
) -> tuple[Tensor, np.ndarray]:
    x, pad = embed_sequences(seqs, params.tables, masked, spec, width)
    h = encode(x, params.blocks, params.config, training, rng, pad)
    return h, pad


def finetune_logits(
    params: ModelParams,
    seqs: Sequence[SequenceArrays],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One logit per sequence from the flattened, pad-zeroed hidden states.

    Sequences longer than the input length keep their most recent entries.
    The batch is only as wide as its longest sequence; the zero rows that
    would follow contribute nothing to the linear head, so the result equals
    a full-width evaluation.
    """
    if params.finetune_head is None:
        raise RuntimeError("no fine-tuning head attached")
    T, d = params.config.input_length, params.config.d_model
    seqs = [s.tail(T) for s in seqs]
    width = max(1, max(len(s) for s in seqs))
    h, pad = hidden_states(params, seqs, training=training, rng=rng, width=width)
    h = nx.mul(h, (~pad)[:, :, None].astype(np.float64))
    flat = nx.reshape(h, (len(seqs), width * d))
    w, b = params.finetune_head
    return nx.add(nx.matmul(flat, nx.index(w, slice(0, width * d))), b)
