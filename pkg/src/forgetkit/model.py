"""Small pre-LN transformer encoder with a masked-LM head.

Parameters are grouped by depth: group 0 holds the token and position tables,
group ``i`` (1..L) holds transformer block ``i``, and group ``L+1`` holds the
final layer norm and the LM projection.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import numcore as nc
from .numcore import Tensor

if TYPE_CHECKING:
    from .data import MaskedBatch

PAD_ID = 0
BOS_ID = 1
MASK_ID = 2
NUM_SPECIAL = 3

CHECKPOINT_MAGIC = b"FGKT"
CHECKPOINT_VERSION = 1


class CorruptCheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    num_layers: int = 4
    hidden: int = 64
    heads: int = 2
    max_len: int = 128
    ff_dim: int = 256

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden dim must be divisible by heads")
        if self.num_layers < 1:
            raise ValueError("need at least one transformer layer")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError("vocab too small for the special tokens")

    @property
    def num_groups(self) -> int:
        return self.num_layers + 2

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return params_digest(self.params)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.params.items()},
                          json.loads(json.dumps(self.metadata)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.config == other.config and self.metadata == other.metadata
                and self.params.keys() == other.params.keys()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F, V = config.hidden, config.ff_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (V, D),
        "embed.pos": (config.max_len, D),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.qkv.w": (D, 3 * D), p + "attn.qkv.b": (3 * D,),
            p + "attn.out.w": (D, D), p + "attn.out.b": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "ff.w1": (D, F), p + "ff.b1": (F,),
            p + "ff.w2": (F, D), p + "ff.b2": (D,),
        })
    shapes.update({"head.ln.g": (D,), "head.ln.b": (D,), "head.w": (D, V), "head.b": (V,)})
    return shapes


def group_of(name: str, config: ModelConfig) -> int:
    if name.startswith("embed."):
        return 0
    if name.startswith("layers."):
        return int(name.split(".")[1]) + 1
    if name.startswith("head."):
        return config.num_layers + 1
    raise KeyError(f"parameter {name!r} belongs to no layer group")


def init_checkpoint(config: ModelConfig, seed: int, stage: str = "init") -> Checkpoint:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    meta = {"stage": stage, "step": 0, "seed": int(seed), "parent": None}
    return Checkpoint(config, params, meta)


class Model:
    """Trainable view of a checkpoint: the same arrays wrapped as named tensors."""

    def __init__(self, ckpt: Checkpoint):
        self.config = ckpt.config
        self.params: dict[str, Tensor] = {
            name: nc.parameter(arr.copy(), name) for name, arr in ckpt.params.items()
        }
        self.metadata = dict(ckpt.metadata)

    def checkpoint(self, **meta) -> Checkpoint:
        metadata = {**self.metadata, **meta}
        return Checkpoint(self.config, {n: p.data.copy() for n, p in self.params.items()}, metadata)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def hidden_states(self, ids: np.ndarray, pad_mask: np.ndarray | None = None) -> list[Tensor]:
        """Residual stream after the embeddings and after each block (L+1 entries)."""
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, T = ids.shape
        if T > cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
        if ids.max() >= cfg.vocab_size or ids.min() < 0:
            raise ValueError("token id outside the vocabulary")
        if pad_mask is None:
            pad_mask = ids != PAD_ID
        # additive attention bias hiding padded keys
        key_bias = np.where(pad_mask, 0.0, -1e9)[:, None, None, :]
        P = self.params
        x = nc.embedding(P["embed.tok"], ids) + nc.getitem(P["embed.pos"], slice(0, T))
        states = [x]
        H, D = cfg.heads, cfg.hidden
        hd = D // H
        scale = 1.0 / np.sqrt(hd)
        for i in range(cfg.num_layers):
            p = f"layers.{i}."
            h = nc.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            qkv = h @ P[p + "attn.qkv.w"] + P[p + "attn.qkv.b"]
            qkv = qkv.reshape(B, T, 3, H, hd).transpose(2, 0, 3, 1, 4)   # (3,B,H,T,hd)
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = nc.softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1, additive_mask=key_bias)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
            x = x + (ctx @ P[p + "attn.out.w"] + P[p + "attn.out.b"])
            h = nc.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            h = nc.gelu(h @ P[p + "ff.w1"] + P[p + "ff.b1"])
            x = x + (h @ P[p + "ff.w2"] + P[p + "ff.b2"])
            states.append(x)
        return states

    def logits(self, ids: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
        x = self.hidden_states(ids, pad_mask)[-1]
        P = self.params
        h = nc.layer_norm(x, P["head.ln.g"], P["head.ln.b"])
        return h @ P["head.w"] + P["head.b"]


def mlm_forward(model: Model, batch: "MaskedBatch") -> tuple[Tensor, Tensor]:
    """Masked-LM loss (mean cross-entropy over target positions) and full logits."""
    if not np.any(batch.target_mask):
        raise ValueError("batch has no masked target positions")
    logits = model.logits(batch.input_ids, batch.input_ids != PAD_ID)
    loss = nc.cross_entropy(logits, batch.targets, batch.target_mask)
    return loss, logits


def encode(model: Model, segment, pooling: str = "avg") -> np.ndarray:
    """One vector per segment from the last encoder layer (``cls`` or ``avg`` pooling)."""
    if pooling not in ("cls", "avg"):
        raise ValueError(f"unknown pooling mode {pooling!r}")
    ids = np.asarray(segment)
    if ids.ndim != 1 or ids.size == 0 or ids[0] != BOS_ID:
        raise ValueError("segment must be a 1-D id sequence starting with <s>")
    last = model.hidden_states(ids[None, :])[-1].data[0]
    if pooling == "cls":
        return last[0].copy()
    keep = ids != PAD_ID
    return last[keep].mean(axis=0)


def encode_batch(model: Model, segments, pooling: str = "avg", batch_size: int = 32) -> np.ndarray:
    from .data import pad_segments

    out = []
    for start in range(0, len(segments), batch_size):
        chunk = segments[start:start + batch_size]
        ids = pad_segments(chunk)
        keep = ids != PAD_ID
        last = model.hidden_states(ids, keep)[-1].data
        if pooling == "cls":
            out.append(last[:, 0, :])
        elif pooling == "avg":
            out.append((last * keep[..., None]).sum(axis=1) / keep.sum(axis=1, keepdims=True))
        else:
            raise ValueError(f"unknown pooling mode {pooling!r}")
    return np.concatenate(out, axis=0)


def layer_parameters(model_or_config, g: int) -> list[str]:
    config = model_or_config if isinstance(model_or_config, ModelConfig) else model_or_config.config
    if not 0 <= g <= config.num_layers + 1:
        raise ValueError(f"layer group {g} outside [0, {config.num_layers + 1}]")
    return [n for n in parameter_shapes(config) if group_of(n, config) == g]


# checkpoint container --------------------------------------------------------
# layout: magic | u32 version | u64 header length | JSON header | float64 LE blobs

def write_container(path, arrays: dict[str, np.ndarray], role: str, config: dict | None,
                    metadata: dict) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "version": CHECKPOINT_VERSION,
        "role": role,
        "config": config,
        "metadata": metadata,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return path


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    return write_container(path, ckpt.params, "model", asdict(ckpt.config), ckpt.metadata)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    if len(raw) < 16 + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    payload = raw[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch (truncated or modified)")
    arrays = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    if header.get("role") != "model":
        raise CorruptCheckpointError(f"{path}: container role is {header.get('role')!r}, not a model")
    config = ModelConfig.from_dict(header["config"])
    expected = parameter_shapes(config)
    if set(arrays) != set(expected):
        raise CorruptCheckpointError(f"{path}: parameter names do not match the embedded config")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CorruptCheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    return Checkpoint(config, arrays, header["metadata"])
