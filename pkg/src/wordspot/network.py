"""Network assembly: presets, initialization, forward/backward, serialization.

An :class:`ArchitectureSpec` is an ordered list of layer descriptors
(conv / maxpool / spp / fc / dropout) plus a head ("sigmoid" or "softmax").
ReLU placement is implied: after every conv and after every fully connected
layer except the last.  The single spatial-pyramid-pooling layer makes the
network accept variable input sizes, so no image resizing is ever needed.

Models are serialized to a little-endian binary container (magic
``PHOCNET1``) holding a JSON metadata blob, per-layer float32 parameter
blobs, and optimizer-state blobs in the same framing.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import layers as L

MAGIC = b"PHOCNET1"
FORMAT_VERSION = 1


class ModelFormatError(Exception):
    """Base class for model (de)serialization failures."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    pass


@dataclass(frozen=True)
class LayerDef:
    """One architecture entry. Unused fields stay at their null defaults."""

    kind: str
    out_channels: int | None = None  # conv
    levels: tuple[int, ...] | None = None  # spp
    out_features: int | None = None  # fc; None = resolved to label_dim at build
    p: float | None = None  # dropout

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv":
            d["out_channels"] = self.out_channels
        elif self.kind == "spp":
            d["levels"] = list(self.levels)
        elif self.kind == "fc":
            d["out_features"] = self.out_features
        elif self.kind == "dropout":
            d["p"] = self.p
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerDef":
        kind = d.get("kind")
        if kind == "conv":
            return LayerDef("conv", out_channels=int(d["out_channels"]))
        if kind == "maxpool":
            return LayerDef("maxpool")
        if kind == "spp":
            return LayerDef("spp", levels=tuple(int(v) for v in d["levels"]))
        if kind == "fc":
            of = d.get("out_features")
            return LayerDef("fc", out_features=None if of is None else int(of))
        if kind == "dropout":
            return LayerDef("dropout", p=float(d["p"]))
        raise ValueError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[LayerDef, ...]
    head: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if self.head not in ("sigmoid", "softmax"):
            raise ValueError(f"head must be 'sigmoid' or 'softmax', got {self.head!r}")
        spp_seen = 0
        fc_seen = 0
        for ld in self.layers:
            if ld.kind == "conv":
                if spp_seen:
                    raise ValueError("conv layers must precede the pyramid pooling layer")
                if not ld.out_channels or ld.out_channels < 1:
                    raise ValueError("conv out_channels must be >= 1")
            elif ld.kind == "maxpool":
                if spp_seen:
                    raise ValueError("pooling layers must precede the pyramid pooling layer")
            elif ld.kind == "spp":
                spp_seen += 1
                if not ld.levels:
                    raise ValueError("spp needs at least one pyramid level")
            elif ld.kind == "fc":
                if not spp_seen:
                    raise ValueError("fully connected layers must follow pyramid pooling")
                fc_seen += 1
                if ld.out_features is not None and ld.out_features < 1:
                    raise ValueError("fc out_features must be >= 1")
            elif ld.kind == "dropout":
                if not spp_seen:
                    raise ValueError("dropout only applies to fully connected activations")
                if ld.p is None or not 0.0 <= ld.p < 1.0:
                    raise ValueError(f"dropout p must be in [0, 1), got {ld.p}")
            else:
                raise ValueError(f"unknown layer kind {ld.kind!r}")
        if spp_seen != 1:
            raise ValueError(f"exactly one pyramid pooling layer required, got {spp_seen}")
        if fc_seen == 0:
            raise ValueError("at least one fully connected layer required")
        if self.layers[-1].kind != "fc":
            raise ValueError("the final layer must be fully connected (the label output)")

    @property
    def spp_levels(self) -> tuple[int, ...]:
        return next(ld.levels for ld in self.layers if ld.kind == "spp")

    @property
    def n_pools(self) -> int:
        return sum(1 for ld in self.layers if ld.kind == "maxpool")

    def min_input_side(self) -> int:
        """Smallest height/width whose pooled map still covers the finest level."""
        return max(self.spp_levels) * (2**self.n_pools)

    def to_dicts(self) -> list[dict]:
        return [ld.to_dict() for ld in self.layers]


def _convs(n: int, ch: int) -> list[LayerDef]:
    return [LayerDef("conv", out_channels=ch) for _ in range(n)]


def preset(name: str, head: str = "sigmoid") -> ArchitectureSpec:
    """Named architectures.

    ``phocnet-full``: 13 conv layers (64..512), two pools, SPP{1,2,4},
    FC4096 x2 with dropout 0.5, label FC.  ``phocnet-mini``: a desk-scale
    variant (16/32/48 channels, one FC512) with the same shape behaviour.
    """
    if name == "phocnet-full":
        body = (
            _convs(2, 64)
            + [LayerDef("maxpool")]
            + _convs(2, 128)
            + [LayerDef("maxpool")]
            + _convs(6, 256)
            + _convs(3, 512)
            + [
                LayerDef("spp", levels=(1, 2, 4)),
                LayerDef("fc", out_features=4096),
                LayerDef("dropout", p=0.5),
                LayerDef("fc", out_features=4096),
                LayerDef("dropout", p=0.5),
                LayerDef("fc", out_features=None),
            ]
        )
    elif name == "phocnet-mini":
        body = (
            _convs(2, 16)
            + [LayerDef("maxpool")]
            + _convs(2, 32)
            + [LayerDef("maxpool")]
            + _convs(2, 48)
            + [
                LayerDef("spp", levels=(1, 2, 4)),
                LayerDef("fc", out_features=512),
                LayerDef("dropout", p=0.5),
                LayerDef("fc", out_features=None),
            ]
        )
    else:
        raise ValueError(f"unknown preset {name!r} (expected 'phocnet-full' or 'phocnet-mini')")
    return ArchitectureSpec(tuple(body), head=head)


class Stage(NamedTuple):
    kind: str  # executable kind: conv/relu/maxpool/spp/fc/dropout
    pidx: int | None  # index into params for conv/fc
    arg: object  # levels for spp, p for dropout


def _materialize(arch: ArchitectureSpec) -> list[Stage]:
    last_fc = max(i for i, ld in enumerate(arch.layers) if ld.kind == "fc")
    stages: list[Stage] = []
    for i, ld in enumerate(arch.layers):
        if ld.kind == "conv":
            stages.append(Stage("conv", i, None))
            stages.append(Stage("relu", None, None))
        elif ld.kind == "maxpool":
            stages.append(Stage("maxpool", None, None))
        elif ld.kind == "spp":
            stages.append(Stage("spp", None, ld.levels))
        elif ld.kind == "fc":
            stages.append(Stage("fc", i, None))
            if i != last_fc:
                stages.append(Stage("relu", None, None))
        elif ld.kind == "dropout":
            stages.append(Stage("dropout", None, ld.p))
    return stages


def _blob_shapes(arch: ArchitectureSpec, label_dim: int, in_channels: int = 1) -> list[dict | None]:
    """Per-descriptor parameter shapes, resolving the label-width FC."""
    shapes: list[dict | None] = []
    ch = in_channels
    width = None
    for i, ld in enumerate(arch.layers):
        if ld.kind == "conv":
            shapes.append({"w": (ld.out_channels, ch, 3, 3), "b": (ld.out_channels,)})
            ch = ld.out_channels
        elif ld.kind == "spp":
            width = ch * sum(lv * lv for lv in ld.levels)
            shapes.append(None)
        elif ld.kind == "fc":
            out = ld.out_features
            if out is None:
                out = label_dim
            if i == len(arch.layers) - 1 and out != label_dim:
                raise ValueError(
                    f"final layer width {out} does not match label dimension {label_dim}"
                )
            shapes.append({"w": (out, width), "b": (out,)})
            width = out
        else:
            shapes.append(None)
    return shapes


@dataclass
class NetworkModel:
    arch: ArchitectureSpec
    label_dim: int
    dtype: np.dtype
    params: list  # per descriptor: {"w": arr, "b": arr} or None
    velocity: list  # same structure, SGD momentum state
    metadata: dict = field(default_factory=dict)
    initialized: bool = False
    stages: list = field(default_factory=list, repr=False)

    def param_blobs(self):
        """Yield (descriptor_index, name, array) over all parameter blobs."""
        for i, p in enumerate(self.params):
            if p is not None:
                yield i, "w", p["w"]
                yield i, "b", p["b"]

    def num_parameters(self) -> int:
        return sum(arr.size for _, _, arr in self.param_blobs())


def build_network(
    arch: ArchitectureSpec | str, label_dim: int, dtype=np.float32, head: str = "sigmoid"
) -> NetworkModel:
    """Allocate an uninitialized model for ``arch`` (spec or preset name)."""
    if isinstance(arch, str):
        arch = preset(arch, head=head)
    if label_dim < 1:
        raise ValueError(f"label_dim must be >= 1, got {label_dim}")
    dtype = np.dtype(dtype)
    shapes = _blob_shapes(arch, label_dim)
    params: list = []
    velocity: list = []
    for sh in shapes:
        if sh is None:
            params.append(None)
            velocity.append(None)
        else:
            params.append({k: np.zeros(s, dtype=dtype) for k, s in sh.items()})
            velocity.append({k: np.zeros(s, dtype=dtype) for k, s in sh.items()})
    return NetworkModel(
        arch=arch,
        label_dim=label_dim,
        dtype=dtype,
        params=params,
        velocity=velocity,
        metadata={"iteration": 0},
        stages=_materialize(arch),
    )


def init_params(model: NetworkModel, rng: np.random.Generator) -> NetworkModel:
    """Uniform [-sqrt(6/n), +sqrt(6/n)] weights (variance 2/n, n = fan-in); zero biases.

    Layers are initialized in architecture order, so a given rng state
    always produces the same network.
    """
    for i, p in enumerate(model.params):
        if p is None:
            continue
        w = p["w"]
        fan_in = int(np.prod(w.shape[1:]))
        bound = float(np.sqrt(6.0 / fan_in))
        w[...] = rng.uniform(-bound, bound, size=w.shape).astype(model.dtype)
        p["b"][...] = 0.0
        model.velocity[i]["w"][...] = 0.0
        model.velocity[i]["b"][...] = 0.0
    model.initialized = True
    return model


class ForwardCache(NamedTuple):
    stage_caches: list
    logits: np.ndarray  # pre-head output of the final fc
    mode: str


def pad_to_minimum(image: np.ndarray, min_h: int, min_w: int) -> np.ndarray:
    """Zero-pad a (1,h,w) image symmetrically up to (min_h, min_w)."""
    _, h, w = image.shape
    ph, pw = max(0, min_h - h), max(0, min_w - w)
    if ph == 0 and pw == 0:
        return image
    out = np.zeros((1, h + ph, w + pw), dtype=image.dtype)
    out[:, ph // 2 : ph // 2 + h, pw // 2 : pw // 2 + w] = image
    return out


def forward(
    model: NetworkModel,
    image: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    strict: bool = False,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on one (1,h,w) image.

    Undersized images are symmetrically zero-padded up to the architecture's
    minimum unless ``strict`` is set, in which case they are rejected with
    the computed minimum in the message.  ``mode="infer"`` skips dropout and
    consumes no randomness.
    """
    if not model.initialized:
        raise ValueError("model parameters are not initialized")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if image.ndim != 3 or image.shape[0] != 1:
        raise ValueError(f"expected a (1,h,w) image, got shape {image.shape}")
    if image.dtype != model.dtype:
        image = image.astype(model.dtype)
    side = model.arch.min_input_side()
    if image.shape[1] < side or image.shape[2] < side:
        if strict:
            raise ValueError(
                f"image {image.shape[1]}x{image.shape[2]} below the minimum input "
                f"size {side}x{side} for this architecture"
            )
        image = pad_to_minimum(image, side, side)

    x = image
    caches = []
    for st in model.stages:
        if st.kind == "conv":
            p = model.params[st.pidx]
            x, c = L.conv3x3_forward(x, p["w"], p["b"])
        elif st.kind == "relu":
            x, c = L.relu_forward(x)
        elif st.kind == "maxpool":
            x, c = L.maxpool2_forward(x)
        elif st.kind == "spp":
            x, c = L.spp_forward(x, st.arg)
        elif st.kind == "fc":
            p = model.params[st.pidx]
            x, c = L.fc_forward(x, p["w"], p["b"])
        else:  # dropout
            x, c = L.dropout_forward(x, st.arg, mode, rng)
        caches.append(c)
    logits = x
    if model.arch.head == "sigmoid":
        y, _ = L.sigmoid_forward(logits)
    else:
        y = L.softmax_forward(logits)
    return y, ForwardCache(caches, logits, mode)


def backward(model: NetworkModel, cache: ForwardCache, grad_logits: np.ndarray) -> list:
    """Backpropagate a gradient w.r.t. the pre-head logits through all stages.

    Returns a grads list parallel to ``model.params``.  The head itself is
    not part of the walk: both training losses hand back fused gradients
    w.r.t. the logits.
    """
    if cache.mode != "train":
        raise ValueError("backward requires a cache produced with mode='train'")
    if grad_logits.shape != cache.logits.shape:
        raise ValueError(
            f"grad_logits shape {grad_logits.shape} != logits shape {cache.logits.shape}"
        )
    grads: list = [None] * len(model.params)
    g = grad_logits
    for st, c in zip(reversed(model.stages), reversed(cache.stage_caches)):
        g, gp = L.layer_backward(st.kind, g, c)
        if gp is not None:
            grads[st.pidx] = {"w": gp[0], "b": gp[1]}
    return grads


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _write_blob(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(_u32(arr.ndim))
    for d in arr.shape:
        buf.write(_u32(d))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_model(model: NetworkModel, path) -> None:
    """Write the model (parameters + optimizer state + metadata) to ``path``."""
    if model.dtype != np.float32:
        raise ValueError("only float32 models are serialized (the on-disk format is float32)")
    meta = {
        "arch": model.arch.to_dicts(),
        "head": model.arch.head,
        "label_dim": model.label_dim,
        "metadata": model.metadata,
    }
    meta_json = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(FORMAT_VERSION))
    buf.write(_u32(len(meta_json)))
    buf.write(meta_json)
    buf.write(_u32(len(model.arch.layers)))
    for i, ld in enumerate(model.arch.layers):
        kind = ld.kind.encode("utf-8")
        buf.write(_u32(len(kind)))
        buf.write(kind)
        p, v = model.params[i], model.velocity[i]
        if p is None:
            buf.write(_u32(0))
            buf.write(_u32(0))
        else:
            buf.write(_u32(2))
            _write_blob(buf, p["w"])
            _write_blob(buf, p["b"])
            buf.write(_u32(2))
            _write_blob(buf, v["w"])
            _write_blob(buf, v["b"])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedModelError(
                f"file ends at byte {len(self.data)}, needed {self.pos + n}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def done(self) -> bool:
        return self.pos == len(self.data)


def _read_blob(r: _Reader, expected_shape: tuple[int, ...], what: str) -> np.ndarray:
    rank = r.u32()
    if rank > 8:
        raise ShapeMismatchError(f"{what}: implausible rank {rank}")
    shape = tuple(r.u32() for _ in range(rank))
    if shape != expected_shape:
        raise ShapeMismatchError(f"{what}: stored shape {shape}, expected {expected_shape}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = r.take(4 * count)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def load_model(path) -> NetworkModel:
    """Read a model written by :func:`save_model`, validating the container.

    Raises :class:`BadMagicError`, :class:`VersionMismatchError`,
    :class:`TruncatedModelError` or :class:`ShapeMismatchError` for the
    corresponding classes of malformed files.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{path}: not a model file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    meta_len = r.u32()
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        arch = ArchitectureSpec(
            tuple(LayerDef.from_dict(d) for d in meta["arch"]), head=meta["head"]
        )
        label_dim = int(meta["label_dim"])
        model = build_network(arch, label_dim)
    except TruncatedModelError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: invalid metadata: {exc}") from exc
    n_layers = r.u32()
    if n_layers != len(arch.layers):
        raise ShapeMismatchError(
            f"{path}: {n_layers} layer records, metadata describes {len(arch.layers)}"
        )
    for i, ld in enumerate(arch.layers):
        klen = r.u32()
        kind = r.take(klen).decode("utf-8", errors="replace")
        if kind != ld.kind:
            raise ShapeMismatchError(f"{path}: layer {i} kind {kind!r}, metadata says {ld.kind!r}")
        for dest, label in ((model.params[i], "params"), (model.velocity[i], "state")):
            nblobs = r.u32()
            expected = 0 if dest is None else 2
            if nblobs != expected:
                raise ShapeMismatchError(
                    f"{path}: layer {i} has {nblobs} {label} blobs, expected {expected}"
                )
            if dest is not None:
                dest["w"] = _read_blob(r, dest["w"].shape, f"layer {i} {label} w")
                dest["b"] = _read_blob(r, dest["b"].shape, f"layer {i} {label} b")
    if not r.done():
        raise ModelFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    model.metadata = meta.get("metadata", {})
    model.initialized = True
    return model
