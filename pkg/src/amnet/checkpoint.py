"""Versioned binary checkpoints for pre-training state.

Layout::

    magic (8 bytes) | format version (u32 LE) | header length (u64 LE)
    | header (UTF-8 JSON) | parameter blobs | Adam first moments | Adam second moments

Moments are stored only for the parameters the optimizer updates.

Every blob is float64 little-endian in the order the header lists.  The
header carries the encoder config, MaskSpec, training config, vocabulary,
step, seed and loss history; per-step random streams are derived from
(seed, step), so those two numbers are the complete rng state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from amnet.encoder import EncoderConfig
from amnet.errors import CheckpointError
from amnet.features import ExerciseVocab, MaskSpec
from amnet.model import ModelParams
from amnet.training import Adam, PretrainState, TrainConfig

MAGIC = b"AMNETCK\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPE = np.dtype("<f8")


def _header(state: PretrainState) -> dict:
    params = state.params.named_parameters()
    return {
        "encoder": state.params.config.to_dict(),
        "mask_spec": state.spec.to_dict(),
        "train": state.train_config.to_dict(),
        "vocab": list(state.params.vocab.ids),
        "seed": state.seed,
        "step": state.step,
        "optimizer_step": state.optimizer.step_count,
        "losses": state.losses,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "optimizer_params": list(state.optimizer.m),
    }


def to_bytes(state: PretrainState) -> bytes:
    header = json.dumps(_header(state), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for t in state.params.named_parameters().values():
        parts.append(np.ascontiguousarray(t.data, dtype=_DTYPE).tobytes())
    for moments in (state.optimizer.m, state.optimizer.v):
        for arr in moments.values():
            parts.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    return b"".join(parts)


def save_checkpoint(state: PretrainState, path: str | Path) -> str:
    """Write ``state`` atomically and return the sha256 digest of the file."""
    data = to_bytes(state)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def from_bytes(data: bytes) -> PretrainState:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not an amnet checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
        config = EncoderConfig(**header["encoder"])
        spec = MaskSpec.from_dict(header["mask_spec"])
        train = TrainConfig(**header["train"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    params = ModelParams.init(config, ExerciseVocab(header["vocab"]), np.random.default_rng(0), spec.ordered_predict())
    tensors = params.named_parameters()
    declared = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    expected = [(k, v.shape) for k, v in tensors.items()]
    if declared != expected:
        raise CheckpointError("checkpoint parameter layout does not match its declared config")

    opt = Adam(params.trainable(), train.beta1, train.beta2, train.adam_eps)
    if header.get("optimizer_params") != list(opt.params):
        raise CheckpointError("checkpoint optimizer layout does not match its parameters")
    shapes = dict(declared)
    offset = start + hlen
    n_param = sum(int(np.prod(s)) for s in shapes.values())
    n_moment = sum(int(np.prod(shapes[k])) for k in opt.params)
    need = offset + (n_param + 2 * n_moment) * _DTYPE.itemsize
    if len(data) != need:
        raise CheckpointError(f"checkpoint body has {len(data)} bytes, expected {need}")

    def read(names) -> dict[str, np.ndarray]:
        nonlocal offset
        out = {}
        for name in names:
            n = int(np.prod(shapes[name]))
            out[name] = np.frombuffer(data, _DTYPE, n, offset).reshape(shapes[name]).astype(np.float64)
            offset += n * _DTYPE.itemsize
        return out

    values = read(shapes)
    for name, t in tensors.items():
        t.data = values[name]
    opt.m = read(opt.params)
    opt.v = read(opt.params)
    opt.step_count = int(header["optimizer_step"])
    return PretrainState(params, opt, spec, train, int(header["seed"]), int(header["step"]), list(header["losses"]))


def load_checkpoint(path: str | Path) -> PretrainState:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
