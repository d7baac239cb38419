"""Frozen differentiable scorers and activation selectors.

Two kinds of scorer live here: :class:`ModelSpec`, a small layered network
built from :mod:`mdm.tensorcore` ops (with a trainable quadrant-blob CNN for
end-to-end runs), and :class:`AdditiveOracle`, an analytic scorer whose
response is exactly additive over disjoint image regions and strictly
ordered by region weight.  Both expose ``input_shape`` and ``forward``.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


# --- layers -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    def params(self):
        return (self.weight,) if self.bias is None else (self.weight, self.bias)

    def out_shape(self, shape):
        c, h, w = shape
        c_out, c_in, k, _ = self.weight.shape
        if c != c_in:
            raise tc.ShapeError(f"conv expects {c_in} input channels, got {c}")
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if k > hp or k > wp:
            raise tc.ShapeError(f"conv kernel {k} larger than padded input {hp}×{wp}")
        return (c_out, (hp - k) // self.stride + 1, (wp - k) // self.stride + 1)

    def apply(self, x, params):
        bias = params[1] if len(params) > 1 else None
        return tc.conv2d(x, params[0], bias, self.stride, self.padding)


@dataclass(frozen=True, eq=False)
class ReLU:
    def params(self):
        return ()

    def out_shape(self, shape):
        return shape

    def apply(self, x, params):
        return tc.relu(x)


@dataclass(frozen=True, eq=False)
class AvgPool2d:
    window: int
    stride: int

    def params(self):
        return ()

    def out_shape(self, shape):
        c, h, w = shape
        if self.window > h or self.window > w:
            raise tc.ShapeError(f"pool window {self.window} exceeds {h}×{w}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def apply(self, x, params):
        return tc.avg_pool2d(x, self.window, self.stride)


@dataclass(frozen=True, eq=False)
class GlobalAvgPool:
    def params(self):
        return ()

    def out_shape(self, shape):
        if len(shape) != 3:
            raise tc.ShapeError(f"global pooling needs C×H×W, got {shape}")
        return (shape[0],)

    def apply(self, x, params):
        return tc.global_avg_pool(x)


@dataclass(frozen=True, eq=False)
class Linear:
    weight: np.ndarray
    bias: np.ndarray | None = None

    def params(self):
        return (self.weight,) if self.bias is None else (self.weight, self.bias)

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weight.shape[1]:
            raise tc.ShapeError(f"linear expects ({self.weight.shape[1]},), got {shape}")
        return (self.weight.shape[0],)

    def apply(self, x, params):
        return tc.linear(x, params[0], params[1] if len(params) > 1 else None)


@dataclass(frozen=True, eq=False)
class CoordChannels:
    """Append position-modulated copies of the input: ``X * row`` and ``X * col``.

    Global average pooling discards location; these planes let the network
    tell which quadrant a feature sits in.  Row and column run over [-1, 1].
    Because the planes scale with the input, a masked-out pixel carries no
    position signal either.
    """

    def params(self):
        return ()

    def out_shape(self, shape):
        c, h, w = shape
        return (3 * c, h, w)

    def apply(self, x, params):
        c, h, w = x.shape
        planes = coord_planes(h, w)
        rows = tc.mul(x, Tensor(np.broadcast_to(planes[0], (c, h, w))))
        cols = tc.mul(x, Tensor(np.broadcast_to(planes[1], (c, h, w))))
        return tc.concat([x, rows, cols], axis=0)


def coord_planes(h: int, w: int) -> np.ndarray:
    rows = np.broadcast_to(np.linspace(-1.0, 1.0, h)[:, None], (h, w))
    cols = np.broadcast_to(np.linspace(-1.0, 1.0, w)[None, :], (h, w))
    return np.stack([rows, cols])


Layer = Union[Conv2d, ReLU, AvgPool2d, GlobalAvgPool, Linear, CoordChannels]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """An immutable feed-forward network over a single C×H×W image."""

    layers: tuple
    input_shape: tuple[int, int, int]
    output_shape: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "output_shape", shape)
        for p in self.parameters():
            p.flags.writeable = False

    @property
    def num_outputs(self) -> int:
        return int(np.prod(self.output_shape))

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def _frozen(self) -> list[Tensor]:
        cached = self.__dict__.get("_const")
        if cached is None:
            cached = [Tensor(p) for p in self.parameters()]
            object.__setattr__(self, "_const", cached)
        return cached

    def forward(self, image, params: Sequence[Tensor] | None = None) -> Tensor:
        """Run the network.  ``params`` substitutes trainable tensors for the frozen weights."""
        x = tc.as_tensor(image)
        if x.shape != self.input_shape:
            raise tc.ShapeError(f"model expects input {self.input_shape}, got {x.shape}")
        params = self._frozen() if params is None else list(params)
        i = 0
        for layer in self.layers:
            n = len(layer.params())
            x = layer.apply(x, params[i:i + n])
            i += n
        return x

    def logits(self, image) -> np.ndarray:
        return self.forward(np.asarray(image, dtype=np.float64)).data

    def predict_proba(self, image) -> np.ndarray:
        return tc.softmax(self.logits(image))

    def with_parameters(self, arrays: Sequence[np.ndarray]) -> "ModelSpec":
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        layers, i = [], 0
        for layer in self.layers:
            n = len(layer.params())
            if isinstance(layer, Conv2d):
                bias = arrays[i + 1] if n == 2 else None
                layers.append(Conv2d(arrays[i], bias, layer.stride, layer.padding))
            elif isinstance(layer, Linear):
                layers.append(Linear(arrays[i], arrays[i + 1] if n == 2 else None))
            else:
                layers.append(layer)
            i += n
        return ModelSpec(tuple(layers), self.input_shape)


# --- activation selector --------------------------------------------------------


@dataclass(frozen=True)
class ActivationSelector:
    """Which model output position the masked image must stay consistent at.

    ``mode`` is ``"logit"`` (one class score), ``"logit_vector"`` (all
    outputs) or ``"spatial"`` (one channel of a C×H×W output, either at a
    single ``(row, col)`` or, with both left as None, the whole map).
    """

    mode: str = "logit_vector"
    index: int | None = None
    row: int | None = None
    col: int | None = None

    @classmethod
    def logit(cls, c: int) -> "ActivationSelector":
        return cls("logit", c)

    @classmethod
    def logit_vector(cls) -> "ActivationSelector":
        return cls("logit_vector")

    @classmethod
    def spatial(cls, channel: int, row: int | None = None, col: int | None = None) -> "ActivationSelector":
        return cls("spatial", channel, row, col)

    def flat_indices(self, out_shape: tuple[int, ...]) -> np.ndarray | None:
        n = int(np.prod(out_shape))
        if self.mode == "logit_vector":
            return None
        if self.mode == "logit":
            if self.index is None or not 0 <= self.index < n:
                raise IndexError(f"logit {self.index} outside output of size {n}")
            return np.array([self.index])
        if self.mode == "spatial":
            if len(out_shape) != 3:
                raise IndexError(f"spatial selector needs a C×H×W output, got {out_shape}")
            c, h, w = out_shape
            if self.index is None or not 0 <= self.index < c:
                raise IndexError(f"channel {self.index} outside {c} channels")
            if self.row is None and self.col is None:
                return np.arange(self.index * h * w, (self.index + 1) * h * w)
            if self.row is None or self.col is None or not (0 <= self.row < h and 0 <= self.col < w):
                raise IndexError(f"location ({self.row}, {self.col}) outside {h}×{w}")
            return np.array([(self.index * h + self.row) * w + self.col])
        raise ValueError(f"unknown selector mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "index": self.index, "row": self.row, "col": self.col}

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationSelector":
        return cls(d.get("mode", "logit_vector"), d.get("index"), d.get("row"), d.get("col"))


def forward_activation(model, image, sel: ActivationSelector) -> Tensor:
    """The activation of ``model`` at the selected position, differentiable w.r.t. ``image``."""
    out = model.forward(image)
    idx = sel.flat_indices(out.shape)
    if idx is None:
        return tc.reshape(out, (out.size,))
    return tc.take(out, idx)


# --- additive information oracle ------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdditiveOracle:
    """Analytic scorer ``(1/k) * sum_r w_r * mean(mask over region r)**q``.

    Regions are disjoint rectangles ``(row0, row1, col0, col1)`` (half-open)
    that together cover the H×W grid.  Information from disjoint regions adds
    exactly, and for ``m > 0`` the marginal information of a region grows with
    its weight.
    """

    shape: tuple[int, int]
    regions: tuple[tuple[int, int, int, int], ...]
    weights: tuple[float, ...]
    gain: float = 1.0
    exponent: float = 1.0

    def __post_init__(self):
        h, w = self.shape
        if len(self.regions) != len(self.weights):
            raise ValueError("one weight per region required")
        if self.gain <= 0 or self.exponent <= 0:
            raise ValueError("gain and exponent must be positive")
        if any(wt < 0 for wt in self.weights) or sum(self.weights) > 1 + 1e-12:
            raise ValueError("weights must be nonnegative and sum to at most 1")
        cover = np.zeros((h, w), dtype=np.int64)
        for r0, r1, c0, c1 in self.regions:
            if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
                raise ValueError(f"region {(r0, r1, c0, c1)} outside {h}×{w}")
            cover[r0:r1, c0:c1] += 1
        if (cover != 1).any():
            raise ValueError("regions must be pairwise disjoint and cover the grid")
        avg = np.zeros((len(self.regions), h * w))
        for i, (r0, r1, c0, c1) in enumerate(self.regions):
            cell = np.zeros((h, w))
            cell[r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
            avg[i] = cell.reshape(-1)
        object.__setattr__(self, "_avg", avg)

    @classmethod
    def grid(cls, shape, rows: int, cols: int, weights, **kw) -> "AdditiveOracle":
        h, w = shape
        rb = np.linspace(0, h, rows + 1).round().astype(int)
        cb = np.linspace(0, w, cols + 1).round().astype(int)
        regions = tuple((int(rb[i]), int(rb[i + 1]), int(cb[j]), int(cb[j + 1]))
                        for i in range(rows) for j in range(cols))
        return cls(tuple(shape), regions, tuple(float(x) for x in weights), **kw)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (1,) + tuple(self.shape)

    def parameters(self) -> list[np.ndarray]:
        return [np.asarray(self.weights, dtype=np.float64)]

    def fingerprint(self) -> str:
        return hashlib.sha256(repr((self.shape, self.regions, self.weights,
                                    self.gain, self.exponent)).encode()).hexdigest()

    def region_means(self, mask) -> np.ndarray:
        return self._avg @ np.asarray(mask, dtype=np.float64).reshape(-1)

    def forward(self, image) -> Tensor:
        x = tc.as_tensor(image)
        if x.size != self.shape[0] * self.shape[1]:
            raise tc.ShapeError(f"oracle expects {self.shape} input, got {x.shape}")
        if x.data.min() < -1e-9 or x.data.max() > 1 + 1e-9:
            raise ValueError("oracle input must lie in [0, 1]")
        means = tc.linear(tc.reshape(x, (x.size,)), Tensor(self._avg))
        means = tc.clamp01(means)
        resp = tc.power(means, self.exponent)
        total = tc.linear(resp, Tensor(np.asarray(self.weights)[None, :] / self.gain))
        return total

    def information(self, mask) -> float:
        """``I = k * f`` for a given mask."""
        m = np.clip(self.region_means(mask), 0.0, 1.0)
        return float(np.dot(self.weights, m ** self.exponent))


def additive_oracle_forward(oracle: AdditiveOracle, mask) -> Tensor:
    return oracle.forward(tc.as_tensor(mask))


# --- synthetic quadrant-blob data -------------------------------------------------


@dataclass(frozen=True, eq=False)
class SynthSample:
    image: np.ndarray
    label: int
    center: tuple[float, float]
    sigma: float

    def blob_mask(self, level: float = 0.25) -> np.ndarray:
        """Foreground: pixels where the blob profile is at least ``level`` of its peak."""
        _, h, w = self.image.shape
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = (yy - self.center[0]) ** 2 + (xx - self.center[1]) ** 2
        return (np.exp(-r2 / (2 * self.sigma ** 2)) >= level).astype(np.float64)


def quadrant_of(center: tuple[float, float], size: int) -> int:
    half = size / 2.0
    return int(center[0] >= half) * 2 + int(center[1] >= half)


def synth_dataset(seed: int, n: int, size: int = 24, channels: int = 1) -> list[SynthSample]:
    """Dim noisy images with one bright Gaussian blob; the blob's quadrant is the label.

    Labels 0..3 are top-left, top-right, bottom-left, bottom-right.  Labels
    are balanced then shuffled.
    """
    if n < 1 or size < 16:
        raise ValueError("need n >= 1 and size >= 16")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 4)
    sigma = size / 10.0
    half = size / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    out = []
    for label in labels:
        qy, qx = divmod(int(label), 2)
        cy = qy * half + rng.uniform(sigma, half - sigma)
        cx = qx * half + rng.uniform(sigma, half - sigma)
        peak = rng.uniform(0.8, 1.0)
        blob = peak * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        background = rng.uniform(0.0, 0.2, size=(channels, size, size))
        image = np.clip(background + blob[None], 0.0, 1.0)
        out.append(SynthSample(image, int(label), (float(cy), float(cx)), sigma))
    return out


# --- tiny CNN ---------------------------------------------------------------------


def build_tiny_cnn(seed: int, in_channels: int = 1, size: int = 24, num_classes: int = 4,
                   bias: bool = False) -> ModelSpec:
    """coords - conv(8,3x3) - relu - pool(2) - conv(16,3x3) - relu - GAP - linear(K).

    Without biases the network is positively homogeneous, ``f(tX) = t f(X)``
    for ``t >= 0``, so the blank image scores exactly zero for every class.
    """
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    def zeros(n):
        return np.zeros(n) if bias else None

    c0 = 3 * in_channels
    layers = (
        CoordChannels(),
        Conv2d(he((8, c0, 3, 3), c0 * 9), zeros(8), 1, 1),
        ReLU(),
        AvgPool2d(2, 2),
        Conv2d(he((16, 8, 3, 3), 8 * 9), zeros(16), 1, 1),
        ReLU(),
        GlobalAvgPool(),
        Linear(he((num_classes, 16), 16), zeros(num_classes)),
    )
    return ModelSpec(layers, (in_channels, size, size))


@dataclass
class TrainReport:
    epochs: int
    losses: list[float]
    accuracy: float


def accuracy(model: ModelSpec, samples: Sequence[SynthSample]) -> float:
    hits = sum(int(np.argmax(model.logits(s.image)) == s.label) for s in samples)
    return hits / len(samples)


def train_tiny_cnn(model: ModelSpec, dataset: Sequence[SynthSample], epochs: int = 30,
                   lr: float = 0.01, seed: int = 0) -> tuple[ModelSpec, TrainReport]:
    """Per-sample Adam on softmax cross-entropy.  Returns a new frozen model."""
    if not dataset:
        raise ValueError("empty training set")
    params = [Tensor(p, requires_grad=True) for p in model.parameters()]
    state = tc.AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for i in rng.permutation(len(dataset)):
            sample = dataset[i]
            try:
                with np.errstate(over="ignore", invalid="ignore"), tc.Session() as s:
                    loss = tc.softmax_cross_entropy(model.forward(sample.image, params), sample.label)
                    s.backward(loss)
                    tc.adam_step(params, [p.grad for p in params], state)
                    if not all(np.isfinite(p.data).all() for p in params):
                        raise tc.NonFiniteError("parameters became non-finite")
            except tc.NonFiniteError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}, sample {i}: {exc}") from None
            total += loss.item()
        losses.append(total / len(dataset))
    trained = model.with_parameters([p.data for p in params]) if epochs else model
    return trained, TrainReport(epochs, losses, accuracy(trained, dataset))


# --- weight file ------------------------------------------------------------------
# "MDMW" | u16 version | u32 C,H,W | u32 layer count | layers... | u32 crc32
# layer: u8 kind | u32 a, b | u8 tensor count | tensors...
# tensor: u32 rank | u32 extents[rank] | f64 payload (little-endian)
# The CRC covers every byte between the magic and the CRC itself.

MAGIC = b"MDMW"
FORMAT_VERSION = 1
_KINDS = {Conv2d: 1, ReLU: 2, AvgPool2d: 3, GlobalAvgPool: 4, Linear: 5, CoordChannels: 6}


def _layer_hyper(layer) -> tuple[int, int]:
    if isinstance(layer, Conv2d):
        return layer.stride, layer.padding
    if isinstance(layer, AvgPool2d):
        return layer.window, layer.stride
    return 0, 0


def model_to_bytes(model: ModelSpec) -> bytes:
    body = io.BytesIO()
    body.write(struct.pack("<H3II", FORMAT_VERSION, *model.input_shape, len(model.layers)))
    for layer in model.layers:
        tensors = layer.params()
        body.write(struct.pack("<B2IB", _KINDS[type(layer)], *_layer_hyper(layer), len(tensors)))
        for t in tensors:
            body.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
            body.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    payload = body.getvalue()
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def model_from_bytes(blob: bytes) -> ModelSpec:
    if blob[:4] != MAGIC:
        raise ModelFormatError("bad magic; not an MDMW weight file")
    if len(blob) < 4 + 18 + 4:
        raise ModelFormatError("truncated weight file")
    payload, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ModelFormatError("checksum mismatch; file corrupted or truncated")
    buf = io.BytesIO(payload)

    def read(fmt):
        size = struct.calcsize(fmt)
        chunk = buf.read(size)
        if len(chunk) != size:
            raise ModelFormatError("truncated weight file")
        return struct.unpack(fmt, chunk)

    version, c, h, w, n_layers = read("<H3II")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    layers = []
    for _ in range(n_layers):
        kind, a, b, n_t = read("<B2IB")
        tensors = []
        for _ in range(n_t):
            (rank,) = read("<I")
            shape = read(f"<{rank}I")
            count = int(np.prod(shape))
            raw = buf.read(8 * count)
            if len(raw) != 8 * count:
                raise ModelFormatError("truncated tensor payload")
            tensors.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
        try:
            if kind == 1:
                layers.append(Conv2d(tensors[0], tensors[1] if n_t > 1 else None, a, b))
            elif kind == 2:
                layers.append(ReLU())
            elif kind == 3:
                layers.append(AvgPool2d(a, b))
            elif kind == 4:
                layers.append(GlobalAvgPool())
            elif kind == 5:
                layers.append(Linear(tensors[0], tensors[1] if n_t > 1 else None))
            elif kind == 6:
                layers.append(CoordChannels())
            else:
                raise ModelFormatError(f"unknown layer kind {kind}")
        except IndexError:
            raise ModelFormatError(f"layer kind {kind} is missing tensors") from None
    if buf.read(1):
        raise ModelFormatError("trailing bytes after layer table")
    try:
        return ModelSpec(tuple(layers), (c, h, w))
    except tc.ShapeError as exc:
        raise ModelFormatError(f"shape table mismatch: {exc}") from None


def save_model(model: ModelSpec, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ModelSpec:
    return model_from_bytes(Path(path).read_bytes())
