"""A small sequential CNN with cached forward passes and hand-written backprop.

Only what attribution needs is here: one image at a time, a forward pass that
keeps every intermediate activation, and reverse accumulation of the gradient
of one class score down to any layer.  Weights are stored in the CAMF file
format (see ``save_model``).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import SplitMix64
from .tensor import PRECISIONS, ShapeError

LAYER_KINDS = ("conv2d", "relu", "maxpool", "flatten", "dense")
SCORE_MODES = ("pre", "post")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int | None = None
    in_channels: int | None = None
    kernel_h: int | None = None
    kernel_w: int | None = None
    stride: int | None = None
    padding: int | None = None
    window: int | None = None
    out_features: int | None = None
    in_features: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        required = {
            "conv2d": ("out_channels", "in_channels", "kernel_h", "kernel_w", "stride", "padding"),
            "maxpool": ("window", "stride"),
            "dense": ("out_features", "in_features"),
        }.get(self.kind, ())
        for name in LayerSpec.__dataclass_fields__:
            if name == "kind":
                continue
            value = getattr(self, name)
            if name in required:
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ValueError(f"{self.kind} layer needs integer {name}")
            elif value is not None:
                raise ValueError(f"{self.kind} layer does not take {name}")
        if self.kind == "conv2d":
            if min(self.out_channels, self.in_channels, self.kernel_h, self.kernel_w) < 1:
                raise ValueError("conv2d sizes must be positive")
            if self.stride < 1 or self.padding < 0:
                raise ValueError("conv2d needs stride >= 1 and padding >= 0")
        elif self.kind == "maxpool":
            if self.window < 1 or self.stride < 1:
                raise ValueError("maxpool needs window >= 1 and stride >= 1")
        elif self.kind == "dense":
            if self.out_features < 1 or self.in_features < 1:
                raise ValueError("dense sizes must be positive")

    @property
    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w), (self.out_channels,)
        if self.kind == "dense":
            return (self.out_features, self.in_features), (self.out_features,)
        return ()

    @property
    def fan_in(self) -> int:
        if self.kind == "conv2d":
            return self.in_channels * self.kernel_h * self.kernel_w
        if self.kind == "dense":
            return self.in_features
        return 0

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise ShapeError(f"conv2d expects [{self.in_channels}, H, W], got {list(shape)}")
            _, h, w = shape
            ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
            wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
            if h + 2 * self.padding < self.kernel_h or w + 2 * self.padding < self.kernel_w:
                raise ShapeError(f"conv2d kernel larger than padded input {list(shape)}")
            return (self.out_channels, ho, wo)
        if self.kind == "maxpool":
            if len(shape) != 3 or shape[1] < self.window or shape[2] < self.window:
                raise ShapeError(f"maxpool window {self.window} does not fit {list(shape)}")
            c, h, w = shape
            return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)
        if self.kind == "dense":
            if tuple(shape) != (self.in_features,):
                raise ShapeError(f"dense expects [{self.in_features}], got {list(shape)}")
            return (self.out_features,)
        if self.kind == "flatten":
            return (math.prod(shape),)
        return tuple(shape)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def conv2d(out_channels, in_channels, kernel_h, kernel_w, stride=1, padding=0) -> LayerSpec:
    return LayerSpec("conv2d", out_channels=out_channels, in_channels=in_channels,
                     kernel_h=kernel_h, kernel_w=kernel_w, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window, stride=None) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=window if stride is None else stride)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(out_features, in_features) -> LayerSpec:
    return LayerSpec("dense", out_features=out_features, in_features=in_features)


@dataclass
class Model:
    """Layer list plus one ``(weight, bias)`` pair per parameterized layer.

    ``params[i]`` is ``None`` for layers without weights.  Parameters are cast
    to ``precision`` on construction; the model is not modified afterwards.
    """

    layers: list[LayerSpec]
    params: list[tuple[np.ndarray, np.ndarray] | None]
    input_shape: tuple[int, ...]
    precision: int = 32
    shapes: list[tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be 32 or 64, got {self.precision!r}")
        if not self.layers:
            raise ValueError("model has no layers")
        if len(self.params) != len(self.layers):
            raise ValueError("params must have one entry per layer")
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if not self.input_shape or min(self.input_shape) < 1:
            raise ShapeError(f"bad input shape {self.input_shape}")
        dtype = PRECISIONS[self.precision]
        shape = self.input_shape
        shapes = []
        cast = []
        for i, (layer, p) in enumerate(zip(self.layers, self.params)):
            expected = layer.param_shapes
            if expected:
                if p is None or len(p) != 2:
                    raise ValueError(f"layer {i} ({layer.kind}) needs weight and bias")
                w, b = (np.array(t, dtype=dtype, order="C") for t in p)
                if w.shape != expected[0] or b.shape != expected[1]:
                    raise ShapeError(f"layer {i} params {w.shape}/{b.shape}, expected {expected}")
                w.flags.writeable = False
                b.flags.writeable = False
                cast.append((w, b))
            else:
                if p is not None:
                    raise ValueError(f"layer {i} ({layer.kind}) takes no params")
                cast.append(None)
            shape = layer.output_shape(shape)
            shapes.append(shape)
        if len(shapes[-1]) != 1:
            raise ShapeError(f"final layer must produce a score vector, got {list(shapes[-1])}")
        self.params = cast
        self.shapes = shapes

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def class_count(self) -> int:
        return self.shapes[-1][0]

    def astype(self, precision: int) -> "Model":
        return Model(list(self.layers), list(self.params), self.input_shape, precision)

    def spatial_layers(self) -> list[int]:
        """Indices of layers whose output is a ``[K, H, W]`` feature map."""
        return [i for i, s in enumerate(self.shapes) if len(s) == 3]

    def last_spatial_layer(self) -> int:
        idx = self.spatial_layers()
        if not idx:
            raise ShapeError("model has no spatial layer")
        return idx[-1]


@dataclass(frozen=True)
class ScoreSpec:
    class_index: int
    mode: str = "pre"

    def __post_init__(self):
        if self.mode not in SCORE_MODES:
            raise ValueError(f"score mode must be 'pre' or 'post', got {self.mode!r}")


@dataclass
class ForwardTrace:
    """Cached forward pass.

    ``activations[i]`` is the output of layer ``i``.  When the pass started
    mid-network (``forward_from``), entries before ``start - 1`` are ``None``.
    """

    input: np.ndarray | None
    activations: list[np.ndarray | None]
    pre_softmax: np.ndarray
    post_softmax: np.ndarray
    caches: dict[int, np.ndarray]
    start: int = 0

    def layer_input(self, i: int) -> np.ndarray:
        return self.input if i == 0 else self.activations[i - 1]


def softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - np.max(scores))
    return e / np.sum(e)


def _conv_forward(x, w, b, stride, padding):
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]


def _conv_backward(x, w, stride, padding, grad):
    _, ho, wo = grad.shape
    kh, kw = w.shape[2:]
    c, h, wd = x.shape
    dxp = np.zeros((c, h + 2 * padding, wd + 2 * padding), dtype=grad.dtype)
    for p in range(kh):
        for q in range(kw):
            dxp[:, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += \
                np.tensordot(w[:, :, p, q], grad, axes=([0], [0]))
    return dxp[:, padding:padding + h, padding:padding + wd]


def _pool_forward(x, window, stride):
    win = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(win.shape[:3] + (window * window,))
    # argmax returns the first maximum in scan order, which fixes tie-breaking
    idx = np.argmax(flat, axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(x, window, stride, idx, grad):
    c, ho, wo = grad.shape
    rows = np.arange(ho)[None, :, None] * stride + idx // window
    cols = np.arange(wo)[None, None, :] * stride + idx % window
    chans = np.broadcast_to(np.arange(c)[:, None, None], grad.shape)
    dx = np.zeros(x.shape, dtype=grad.dtype)
    np.add.at(dx, (chans, rows, cols), grad)
    return dx


def _layer_forward(layer: LayerSpec, p, x):
    if layer.kind == "conv2d":
        return _conv_forward(x, p[0], p[1], layer.stride, layer.padding), None
    if layer.kind == "relu":
        return np.maximum(x, 0), None
    if layer.kind == "maxpool":
        return _pool_forward(x, layer.window, layer.stride)
    if layer.kind == "flatten":
        return x.reshape(-1), None
    return p[0] @ x + p[1], None


def _layer_backward(layer: LayerSpec, p, x, cache, grad):
    if layer.kind == "conv2d":
        return _conv_backward(x, p[0], layer.stride, layer.padding, grad)
    if layer.kind == "relu":
        return grad * (x > 0)
    if layer.kind == "maxpool":
        return _pool_backward(x, layer.window, layer.stride, cache, grad)
    if layer.kind == "flatten":
        return grad.reshape(x.shape)
    return p[0].T @ grad


def _run(model: Model, start: int, x: np.ndarray) -> tuple[list, dict]:
    activations: list[np.ndarray | None] = [None] * len(model.layers)
    caches = {}
    for i in range(start, len(model.layers)):
        x, cache = _layer_forward(model.layers[i], model.params[i], x)
        x.flags.writeable = False
        activations[i] = x
        if cache is not None:
            caches[i] = cache
    return activations, caches


def _check_input(model: Model, x, shape) -> np.ndarray:
    x = np.array(x, dtype=model.dtype, order="C")
    if x.shape != tuple(shape):
        raise ShapeError(f"expected input shape {list(shape)}, got {list(x.shape)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    x.flags.writeable = False
    return x


def forward(model: Model, image) -> ForwardTrace:
    """Run the whole network on one image, keeping every activation."""
    x = _check_input(model, image, model.input_shape)
    activations, caches = _run(model, 0, x)
    scores = activations[-1]
    return ForwardTrace(x, activations, scores, softmax(scores), caches, 0)


def forward_from(model: Model, layer_index: int, activation) -> ForwardTrace:
    """Run layers ``layer_index + 1 ..`` on a given output of layer ``layer_index``.

    ``layer_index == -1`` is the same as ``forward``.
    """
    if layer_index == -1:
        return forward(model, activation)
    if not 0 <= layer_index < len(model.layers) - 1:
        raise IndexError(f"layer index {layer_index} out of range")
    x = _check_input(model, activation, model.shapes[layer_index])
    activations, caches = _run(model, layer_index + 1, x)
    activations[layer_index] = x
    scores = activations[-1]
    return ForwardTrace(None, activations, scores, softmax(scores), caches, layer_index + 1)


def score_gradient(trace: ForwardTrace, score: ScoreSpec) -> np.ndarray:
    """d y^c / d S for the selected score mode."""
    n = trace.pre_softmax.shape[0]
    if not 0 <= score.class_index < n:
        raise IndexError(f"class index {score.class_index} out of range [0, {n})")
    if score.mode == "pre":
        d = np.zeros(n, dtype=trace.pre_softmax.dtype)
        d[score.class_index] = 1
        return d
    p = trace.post_softmax
    pc = p[score.class_index]
    d = -pc * p
    d[score.class_index] += pc
    return d


def backprop(model: Model, trace: ForwardTrace, dscores: np.ndarray, layer_index: int) -> np.ndarray:
    """Propagate ``dscores`` (gradient w.r.t. the final scores) back to the output of ``layer_index``.

    ``layer_index == -1`` returns the gradient w.r.t. the network input.
    """
    n = len(model.layers)
    if not -1 <= layer_index < n - 1:
        raise IndexError(f"layer index {layer_index} out of range")
    if layer_index < trace.start - 1:
        raise IndexError(f"trace starts at layer {trace.start}; cannot reach layer {layer_index}")
    grad = np.asarray(dscores, dtype=model.dtype)
    for i in range(n - 1, layer_index, -1):
        grad = _layer_backward(model.layers[i], model.params[i], trace.layer_input(i), trace.caches.get(i), grad)
    return grad


def backward_to_layer(model: Model, trace: ForwardTrace, score: ScoreSpec, layer_index: int) -> np.ndarray:
    """Gradient of the selected class score w.r.t. a feature-map layer.

    The layer must produce a rank-3 ``[K, H, W]`` activation; ``-1`` (the
    input image) is also accepted.
    """
    if layer_index >= 0:
        if not 0 <= layer_index < len(model.layers):
            raise IndexError(f"layer index {layer_index} out of range")
        if len(model.shapes[layer_index]) != 3:
            raise ShapeError(f"layer {layer_index} ({model.layers[layer_index].kind}) is not spatial")
    return backprop(model, trace, score_gradient(trace, score), layer_index)


def activation_pattern(model: Model, trace: ForwardTrace) -> bytes:
    """Fingerprint of every ReLU mask and max-pool argmax in the trace.

    Two points with the same pattern lie on the same linear piece of the
    pre-softmax scores, so finite differences between them see no kink.
    """
    parts = []
    for i in range(trace.start, len(model.layers)):
        kind = model.layers[i].kind
        if kind == "relu":
            parts.append(np.packbits(trace.layer_input(i) > 0).tobytes())
        elif kind == "maxpool":
            parts.append(trace.caches[i].astype(np.int32).tobytes())
    return b"|".join(parts)


# toy models ----------------------------------------------------------------

TOY_ARCHS = {
    "tiny": lambda c: [
        conv2d(4, c, 3, 3, 1, 1), relu(), maxpool(2, 2),
        conv2d(8, 4, 3, 3, 1, 1), relu(), flatten(),
    ],
    "small": lambda c: [
        conv2d(8, c, 3, 3, 1, 1), relu(), maxpool(2, 2),
        conv2d(16, 8, 3, 3, 1, 1), relu(), maxpool(2, 2),
        conv2d(16, 16, 3, 3, 1, 1), relu(), flatten(),
    ],
}


def seeded_params(layers: list[LayerSpec], seed: int):
    """Draw every weight and bias in declaration order from SplitMix64(seed).

    Each value is ``(u - 0.5) / sqrt(fan_in)`` with ``u`` uniform in [0, 1),
    rounded to float32.
    """
    gen = SplitMix64(seed)
    params = []
    for layer in layers:
        shapes = layer.param_shapes
        if not shapes:
            params.append(None)
            continue
        scale = 1.0 / math.sqrt(layer.fan_in)
        pair = []
        for shape in shapes:
            vals = [(u - 0.5) * scale for u in gen.uniforms(math.prod(shape))]
            pair.append(np.array(vals, dtype=np.float64).astype(np.float32).reshape(shape))
        params.append(tuple(pair))
    return params


def generate_toy_model(seed: int, arch: str = "tiny", input_shape=(1, 16, 16), classes: int = 10) -> Model:
    if arch not in TOY_ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {sorted(TOY_ARCHS)}")
    input_shape = tuple(input_shape)
    layers = TOY_ARCHS[arch](input_shape[0])
    shape = input_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    layers.append(dense(classes, shape[0]))
    return Model(layers, seeded_params(layers, seed), input_shape, precision=32)


# CAMF weight files -----------------------------------------------------------

CAMF_MAGIC = b"CAMF"
CAMF_VERSION = 1


class CamfError(Exception):
    code = "camf"


class BadMagicError(CamfError):
    code = "bad-magic"


class UnsupportedVersionError(CamfError):
    code = "bad-version"


class TruncatedFileError(CamfError):
    code = "truncated"


class ManifestError(CamfError):
    code = "invalid-manifest"


class TrailingDataError(CamfError):
    code = "trailing-data"


def _manifest(model: Model) -> dict:
    tensors = []
    for i, layer in enumerate(model.layers):
        for name, shape in zip(("weight", "bias"), layer.param_shapes):
            tensors.append({"layer": i, "name": name, "shape": list(shape)})
    return {
        "format": "CAMF",
        "precision": "float32",
        "input_shape": list(model.input_shape),
        "layers": [layer.to_dict() for layer in model.layers],
        "tensors": tensors,
    }


def model_to_bytes(model: Model) -> bytes:
    manifest = json.dumps(_manifest(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CAMF_MAGIC, struct.pack("<II", CAMF_VERSION, len(manifest)), manifest]
    for p in model.params:
        if p is not None:
            chunks.extend(t.astype("<f4").tobytes(order="C") for t in p)
    return b"".join(chunks)


def model_from_bytes(data: bytes, precision: int = 32) -> Model:
    if len(data) < 4:
        raise TruncatedFileError("file shorter than the magic number")
    if data[:4] != CAMF_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedFileError("file ends inside the header")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != CAMF_VERSION:
        raise UnsupportedVersionError(f"unsupported CAMF version {version}")
    if len(data) < 12 + mlen:
        raise TruncatedFileError("file ends inside the manifest")
    try:
        manifest = json.loads(data[12:12 + mlen].decode("utf-8"))
        layers = [LayerSpec(**spec) for spec in manifest["layers"]]
        input_shape = tuple(manifest["input_shape"])
        tensors = manifest["tensors"]
        if manifest.get("precision") != "float32":
            raise ValueError(f"unsupported stored precision {manifest.get('precision')!r}")
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"invalid manifest: {exc}") from exc

    expected = [(i, name, list(shape)) for i, layer in enumerate(layers)
                for name, shape in zip(("weight", "bias"), layer.param_shapes)]
    try:
        declared = [(t["layer"], t["name"], list(t["shape"])) for t in tensors]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"invalid tensor entry: {exc}") from exc
    if declared != expected:
        raise ManifestError(f"tensor list {declared} does not match layer specs {expected}")

    offset = 12 + mlen
    need = sum(math.prod(shape) for _, _, shape in expected) * 4
    if len(data) - offset < need:
        raise TruncatedFileError(f"weight data truncated: {len(data) - offset} of {need} bytes")
    if len(data) - offset > need:
        raise TrailingDataError(f"{len(data) - offset - need} unexpected bytes after the weights")

    params: list = [None] * len(layers)
    for i, layer in enumerate(layers):
        pair = []
        for shape in layer.param_shapes:
            n = math.prod(shape)
            pair.append(np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape))
            offset += 4 * n
        if pair:
            params[i] = tuple(pair)
    try:
        return Model(layers, params, input_shape, precision=precision)
    except (ValueError, ShapeError) as exc:
        raise ManifestError(f"inconsistent model: {exc}") from exc


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path, precision: int = 32) -> Model:
    return model_from_bytes(Path(path).read_bytes(), precision)
