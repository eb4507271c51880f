"""Classifier network: dense feature extractor plus a linear logit head.

Parameters live in immutable numpy snapshots; the differentiable forward pass
runs over a name → Tensor mapping built by `param_tensors`, so the trainer
differentiates with respect to exactly the tensors it created.  The ndarray
helpers (`embed_array`, `logits_array`) run the same code path with constant
tensors, keeping evaluation and training numerically identical.

Checkpoint format "DGCK" (all integers little-endian):
    magic "DGCK" | u32 version=1 | u32 tensor count
    per tensor: u32 name length | name UTF-8 | u32 rank | u64 dims | f64 values
    then: u32 config length | config text UTF-8 (the dotted-key snapshot)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .errors import (CheckpointFormatError, CheckpointVersionError, ConfigError,
                     ContractError, ShapeError)

MAGIC = b"DGCK"
VERSION = 1


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ModelParams:
    """Immutable parameter snapshot: f_e layers then the logit head.

    Weights are stored input×output so the forward pass is `x @ W + b`.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    head: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        if not self.layers:
            raise ContractError("ModelParams needs at least one layer")
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if prev_out is not None and w.shape[0] != prev_out:
                raise ShapeError(
                    f"layer {i}: input {w.shape[0]} != previous output {prev_out}")
            prev_out = w.shape[1]
        hw, hb = self.head
        if hw.shape[0] != prev_out:
            raise ShapeError(f"head input {hw.shape[0]} != embed dim {prev_out}")
        if hw.shape[1] != hb.shape[0]:
            raise ShapeError(f"head weight {hw.shape} vs bias {hb.shape}")
        for name, arr in self.named_arrays():
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"non-finite values in parameter {name}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.head[0].shape[1]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"layers.{i}.weight", w))
            out.append((f"layers.{i}.bias", b))
        out.append(("head.weight", self.head[0]))
        out.append(("head.bias", self.head[1]))
        return out

    @staticmethod
    def from_named(arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        n = 0
        while f"layers.{n}.weight" in arrays:
            n += 1
        if n == 0 or "head.weight" not in arrays or "head.bias" not in arrays:
            raise ContractError("parameter map missing layer or head tensors")
        expect = {f"layers.{i}.{part}" for i in range(n)
                  for part in ("weight", "bias")} | {"head.weight", "head.bias"}
        if set(arrays) != expect:
            raise ContractError(f"unexpected parameter names: {sorted(set(arrays) - expect)}")
        layers = tuple((_freeze(arrays[f"layers.{i}.weight"]),
                        _freeze(arrays[f"layers.{i}.bias"])) for i in range(n))
        head = (_freeze(arrays["head.weight"]), _freeze(arrays["head.bias"]))
        return ModelParams(layers=layers, head=head)


def init_params(layer_sizes: list[int], embed_dim: int, num_classes: int,
                seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, from a seeded generator.

    `layer_sizes[0]` is the input dimension; the final f_e layer maps to
    `embed_dim` with no activation after it.
    """
    if not layer_sizes:
        raise ConfigError("layer_sizes must be non-empty")
    dims = [*layer_sizes, embed_dim]
    if any(d <= 0 for d in dims) or num_classes <= 0:
        raise ConfigError(f"non-positive model dimension in {dims} / C={num_classes}")
    rng = np.random.default_rng(seed)

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    layers = tuple((_freeze(glorot(dims[i], dims[i + 1])),
                    _freeze(np.zeros(dims[i + 1])))
                   for i in range(len(dims) - 1))
    head = (_freeze(glorot(embed_dim, num_classes)),
            _freeze(np.zeros(num_classes)))
    return ModelParams(layers=layers, head=head)


def params_for(config: TrainConfig, in_dim: int, num_classes: int) -> ModelParams:
    return init_params([in_dim, *config.hidden], config.embed_dim,
                       num_classes, config.seed)


# -- differentiable forward ----------------------------------------------

def param_tensors(params: ModelParams, requires_grad: bool = True) -> dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=requires_grad)
            for name, arr in params.named_arrays()}


def _layer_count(tensors: Mapping[str, Tensor]) -> int:
    n = 0
    while f"layers.{n}.weight" in tensors:
        n += 1
    return n


def embed(x: Tensor | np.ndarray, tensors: Mapping[str, Tensor]) -> Tensor:
    """f_e: affine+ReLU chain, final layer affine only."""
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if h.data.ndim != 2:
        raise ShapeError(f"embed expects a batch×d input, got {h.shape}")
    n = _layer_count(tensors)
    d_in = tensors["layers.0.weight"].shape[0]
    if h.shape[1] != d_in:
        raise ShapeError(f"input dim {h.shape[1]} != model input dim {d_in}")
    for i in range(n):
        h = h @ tensors[f"layers.{i}.weight"] + tensors[f"layers.{i}.bias"]
        if i < n - 1:
            h = ad.relu(h)
    return h


def logits(p: Tensor | np.ndarray, tensors: Mapping[str, Tensor]) -> Tensor:
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    if p.data.ndim != 2 or p.shape[1] != tensors["head.weight"].shape[0]:
        raise ShapeError(
            f"logit head expects batch×{tensors['head.weight'].shape[0]}, got {p.shape}")
    return p @ tensors["head.weight"] + tensors["head.bias"]


def forward(x, tensors: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    p = embed(x, tensors)
    return p, logits(p, tensors)


def embed_array(x: np.ndarray, params: ModelParams) -> np.ndarray:
    return embed(x, param_tensors(params, requires_grad=False)).data


def logits_array(x: np.ndarray, params: ModelParams) -> np.ndarray:
    t = param_tensors(params, requires_grad=False)
    return logits(embed(x, t), t).data


def predict(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    return np.argmax(logits_array(x, params), axis=1)


# -- checkpoint i/o -------------------------------------------------------

def save_checkpoint(params: ModelParams, config: TrainConfig,
                    path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    named = params.named_arrays()
    chunks.append(struct.pack("<I", len(named)))
    for name, arr in named:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    cfg = config.to_text().encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.off = 0
        self.path = path

    def pull(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint {self.path}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.pull(4))[0]


def load_checkpoint(path: str | Path) -> tuple[ModelParams, TrainConfig]:
    p = Path(path)
    r = _Reader(p.read_bytes(), p)
    magic = r.pull(4)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r} in {p} (expected {MAGIC!r})")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} unsupported (expected {VERSION})")
    count = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.pull(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.pull(8 * rank))
        n_vals = int(np.prod(dims)) if rank else 1
        raw = r.pull(8 * n_vals)
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    cfg_text = r.pull(r.u32()).decode("utf-8")
    if r.off != len(r.buf):
        raise CheckpointFormatError(f"trailing bytes after checkpoint {p}")
    return ModelParams.from_named(arrays), TrainConfig.parse(cfg_text)
