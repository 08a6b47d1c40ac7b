"""Bidirectional Transformer encoder (post-norm, ReLU feed-forward)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from amnet import numerics as nx
from amnet.errors import ConfigError
from amnet.numerics import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 2
    d_model: int = 256
    n_heads: int = 8
    ffn_hidden: int | None = None  # 4 * d_model when unset
    dropout_rate: float = 0.2
    input_length: int = 100

    def __post_init__(self):
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.d_model)
        for name in ("d_model", "n_heads", "ffn_hidden", "input_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_blocks < 0:
            raise ConfigError(f"n_blocks must be nonnegative, got {self.n_blocks}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BlockWeights:
    """Weights of one encoder block.

    Per-head projections are stored side by side: columns
    ``i*d_k:(i+1)*d_k`` of ``w_q``/``w_k``/``w_v`` belong to head i, and
    ``w_o`` maps the concatenated heads back to d_model.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator) -> "BlockWeights":
        d, f = config.d_model, config.ffn_hidden
        hd = config.n_heads * config.d_k

        def normal(*shape):
            return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

        def const(value, n):
            return Tensor(np.full(n, value), requires_grad=True)

        return cls(
            w_q=normal(d, hd),
            w_k=normal(d, hd),
            w_v=normal(d, hd),
            w_o=normal(hd, d),
            w1=normal(d, f),
            b1=const(0.0, f),
            w2=normal(f, d),
            b2=const(0.0, d),
            ln1_gain=const(1.0, d),
            ln1_bias=const(0.0, d),
            ln2_gain=const(1.0, d),
            ln2_bias=const(0.0, d),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, hd = x.shape
    return nx.transpose(nx.reshape(x, (B, T, n_heads, hd // n_heads)), (0, 2, 1, 3))


def multi_head_attention(
    x: Tensor, w: BlockWeights, pad_mask: np.ndarray | None, n_heads: int
) -> Tensor:
    """Scaled dot-product self-attention over all positions (no causal mask).

    Padded keys are excluded; a row whose keys are all padding attends to
    nothing and comes out as zeros.
    """
    B, T, _ = x.shape
    q = _split_heads(nx.matmul(x, w.w_q), n_heads)
    k = _split_heads(nx.matmul(x, w.w_k), n_heads)
    v = _split_heads(nx.matmul(x, w.w_v), n_heads)
    d_k = q.shape[-1]
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_k))
    key_mask = None if pad_mask is None else pad_mask[:, None, None, :]
    attn = nx.softmax(scores, axis=-1, mask=key_mask)
    heads = nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3))
    return nx.matmul(nx.reshape(heads, (B, T, n_heads * d_k)), w.w_o)


def feed_forward(x: Tensor, w: BlockWeights) -> Tensor:
    hidden = nx.relu(nx.add(nx.matmul(x, w.w1), w.b1))
    return nx.add(nx.matmul(hidden, w.w2), w.b2)


def encoder_block(
    x: Tensor,
    w: BlockWeights,
    config: EncoderConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    pad_mask: np.ndarray | None = None,
) -> Tensor:
    rate = config.dropout_rate
    attn = nx.dropout(multi_head_attention(x, w, pad_mask, config.n_heads), rate, training, rng)
    a = nx.layer_norm(nx.add(x, attn), w.ln1_gain, w.ln1_bias)
    ffn = nx.dropout(feed_forward(a, w), rate, training, rng)
    return nx.layer_norm(nx.add(a, ffn), w.ln2_gain, w.ln2_bias)


def encode(
    x: Tensor,
    blocks: list[BlockWeights],
    config: EncoderConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    pad_mask: np.ndarray | None = None,
) -> Tensor:
    for w in blocks:
        x = encoder_block(x, w, config, training, rng, pad_mask)
    return x
