"""Small configurable convolutional classifier with named feature-map taps.

Each block is conv -> relu -> optional maxpool; the post-relu map of block i
is exposed as tap ``relu{i}``.  The head flattens and applies a dense layer;
logits are pre-softmax scores.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .seeding import stream


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int | None = None  # pooling window == stride when set


@dataclass(frozen=True)
class ModelSpec:
    name: str
    in_shape: tuple[int, int, int]  # (channels, H, W)
    blocks: tuple[ConvBlock, ...]
    n_classes: int = 7
    bias: bool = True

    def __post_init__(self):
        shapes = self.tap_shapes()  # validates the stack
        if len(set(self.tap_names())) != len(self.blocks):
            raise ModelError("tap names must be unique")
        if not shapes:
            raise ModelError("model needs at least one block")

    def tap_names(self) -> list[str]:
        return [f"relu{i + 1}" for i in range(len(self.blocks))]

    def tap_shapes(self) -> dict[str, tuple[int, int, int]]:
        """(channels, H, W) of every post-relu map, validating extents."""
        c, h, w = self.in_shape
        out: dict[str, tuple[int, int, int]] = {}
        for i, blk in enumerate(self.blocks):
            if blk.out_channels <= 0:
                raise ModelError(f"block {i + 1}: out_channels must be positive")
            h = (h + 2 * blk.padding - blk.kernel) // blk.stride + 1
            w = (w + 2 * blk.padding - blk.kernel) // blk.stride + 1
            c = blk.out_channels
            if h < 1 or w < 1:
                raise ModelError(f"block {i + 1}: spatial extent collapsed to {h}x{w}")
            out[f"relu{i + 1}"] = (c, h, w)
            if blk.pool:
                h, w = (h - blk.pool) // blk.pool + 1, (w - blk.pool) // blk.pool + 1
                if h < 1 or w < 1:
                    raise ModelError(f"block {i + 1}: pooling collapsed spatial extent")
        return out

    def head_in_features(self) -> int:
        c, h, w = self.in_shape
        for blk in self.blocks:
            h = (h + 2 * blk.padding - blk.kernel) // blk.stride + 1
            w = (w + 2 * blk.padding - blk.kernel) // blk.stride + 1
            c = blk.out_channels
            if blk.pool:
                h, w = (h - blk.pool) // blk.pool + 1, (w - blk.pool) // blk.pool + 1
        return c * h * w

    def param_count(self) -> int:
        total = 0
        c = self.in_shape[0]
        for blk in self.blocks:
            total += blk.out_channels * c * blk.kernel * blk.kernel
            if self.bias:
                total += blk.out_channels
            c = blk.out_channels
        total += self.head_in_features() * self.n_classes
        if self.bias:
            total += self.n_classes
        return total


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "name": spec.name,
        "in_shape": list(spec.in_shape),
        "blocks": [
            {
                "out_channels": b.out_channels,
                "kernel": b.kernel,
                "stride": b.stride,
                "padding": b.padding,
                "pool": b.pool,
            }
            for b in spec.blocks
        ],
        "n_classes": spec.n_classes,
        "bias": spec.bias,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        name=d["name"],
        in_shape=tuple(d["in_shape"]),
        blocks=tuple(ConvBlock(**b) for b in d["blocks"]),
        n_classes=d["n_classes"],
        bias=d["bias"],
    )


def toy64(n_classes: int = 7, bias: bool = True) -> ModelSpec:
    """Default grayscale 64x64 classifier, < 200k parameters."""
    return ModelSpec(
        name="toy64",
        in_shape=(1, 64, 64),
        blocks=(
            ConvBlock(8, pool=2),
            ConvBlock(16, pool=2),
            ConvBlock(16),
            ConvBlock(32, pool=2),
        ),
        n_classes=n_classes,
        bias=bias,
    )


def tiny16(n_classes: int = 3, bias: bool = True) -> ModelSpec:
    """Two-conv 16x16 model, small enough for finite-difference sweeps."""
    return ModelSpec(
        name="tiny16",
        in_shape=(1, 16, 16),
        blocks=(ConvBlock(4, pool=2), ConvBlock(6)),
        n_classes=n_classes,
        bias=bias,
    )


_REGISTRY = {"toy64": toy64, "tiny16": tiny16}


def get_spec(name: str, **kwargs) -> ModelSpec:
    if name not in _REGISTRY:
        raise ModelError(f"unknown model spec '{name}' (have: {sorted(_REGISTRY)})")
    return _REGISTRY[name](**kwargs)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

Parameters = dict  # name -> np.ndarray, float64


def init_params(spec: ModelSpec, seed: int) -> Parameters:
    """He-normal weights (variance 2/fan_in), zero biases; per-seed deterministic."""
    params: Parameters = {}
    c = spec.in_shape[0]
    for i, blk in enumerate(spec.blocks):
        name = f"conv{i + 1}"
        fan_in = c * blk.kernel * blk.kernel
        rng = stream(seed, "init", name)
        params[f"{name}.weight"] = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), size=(blk.out_channels, c, blk.kernel, blk.kernel)
        )
        if spec.bias:
            params[f"{name}.bias"] = np.zeros(blk.out_channels)
        c = blk.out_channels
    fan_in = spec.head_in_features()
    rng = stream(seed, "init", "head")
    params["head.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, spec.n_classes))
    if spec.bias:
        params["head.bias"] = np.zeros(spec.n_classes)
    return params


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    logits: Tensor
    taps: dict = field(default_factory=dict)          # tap name -> post-relu Tensor
    params: dict = field(default_factory=dict)        # name -> tracked leaf Tensor


def forward(spec: ModelSpec, params: Parameters, batch, tape: Tape | None = None) -> ForwardTrace:
    """Run the classifier; taps hold the exact tensors used downstream."""
    batch_arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    c, h, w = spec.in_shape
    if batch_arr.ndim != 4 or batch_arr.shape[1:] != (c, h, w):
        raise ModelError(f"batch shape {batch_arr.shape} does not match input {(c, h, w)}")

    if tape is not None:
        leaves = {k: tape.leaf(v, requires_grad=True) for k, v in params.items()}
        x = tape.leaf(batch_arr)
    else:
        leaves = {k: Tensor(v) for k, v in params.items()}
        x = Tensor(batch_arr)

    taps: dict[str, Tensor] = {}
    for i, blk in enumerate(spec.blocks):
        name = f"conv{i + 1}"
        bias = leaves.get(f"{name}.bias")
        x = ad.conv2d(x, leaves[f"{name}.weight"], bias, stride=blk.stride, padding=blk.padding)
        x = ad.relu(x)
        taps[f"relu{i + 1}"] = x
        if blk.pool:
            x = ad.maxpool2d(x, blk.pool, blk.pool)

    n = batch_arr.shape[0]
    flat = ad.reshape(x, (n, spec.head_in_features()))
    logits = ad.matmul(flat, leaves["head.weight"])
    if spec.bias:
        logits = ad.add(logits, ad.reshape(leaves["head.bias"], (1, spec.n_classes)))
    return ForwardTrace(logits=logits, taps=taps, params=leaves)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ModelError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ModelError(f"label out of range [0, {n_classes})")
    row_max = logits.data.max(axis=1, keepdims=True)  # constant shift
    shifted = ad.sub(logits, row_max)
    lse = ad.log(ad.reduce_sum(ad.exp(shifted), axes=1))
    picked = ad.gather(shifted, np.arange(n, dtype=np.int64) * n_classes + labels)
    return ad.mul(ad.reduce_sum(ad.sub(lse, picked)), 1.0 / n)


def predictions(logits: Tensor) -> np.ndarray:
    return np.argmax(logits.data, axis=1)


# ---------------------------------------------------------------------------
# checkpoints: JSON header + raw little-endian float64 payload
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, spec: ModelSpec, params: Parameters) -> None:
    """Atomic write; round trip is bit-exact."""
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"spec": spec_to_dict(spec), "entries": entries}).encode()
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + b"\n")
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[ModelSpec, Parameters]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode())
        spec = spec_from_dict(header["spec"])
        params: Parameters = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            start = entry["offset"]
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
            params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ModelError(f"corrupt checkpoint {path}: {exc}") from exc
    return spec, params
