"""Feature extractor, cosine-prototype classifier and normalization layers."""

from __future__ import annotations

import copy
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import EPS_NORM, DomainError, ShapeError, Tensor

VAR_EPS = 1e-5
CHECKPOINT_MAGIC = b"PIFS1"


class NormMode(str, enum.Enum):
    BATCH_NORM = "bn"
    BATCH_RENORM = "br"


@dataclass
class NormLayer:
    """Per-channel normalization over every axis except axis 1."""

    channels: int
    mode: NormMode = NormMode.BATCH_NORM
    momentum: float = 0.1
    frozen: bool = False
    clip: bool = False
    rmax: float = 3.0
    dmax: float = 5.0
    gamma: Tensor = field(default=None)
    beta: Tensor = field(default=None)
    mu_r: np.ndarray = field(default=None)
    sigma_r: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = Tensor(np.ones(self.channels), requires_grad=True)
        if self.beta is None:
            self.beta = Tensor(np.zeros(self.channels), requires_grad=True)
        if self.mu_r is None:
            self.mu_r = np.zeros(self.channels)
        if self.sigma_r is None:
            self.sigma_r = np.ones(self.channels)
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")

    def __call__(self, z: Tensor, training: bool) -> Tensor:
        if not training:
            return running_norm_forward(z, self)
        if self.mode is NormMode.BATCH_RENORM:
            return batch_renorm_forward(z, self)
        return batch_norm_forward(z, self, training=True)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def _per_channel(v, z: Tensor) -> Tensor:
    shape = [1] * z.ndim
    shape[1] = z.shape[1]
    return T.broadcast_to(T.reshape(v, shape), z.shape)


def _batch_statistics(z: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if z.ndim < 2:
        raise ShapeError(f"normalization expects N x C x ..., got shape {z.shape}")
    axes = (0,) + tuple(range(2, z.ndim))
    count = z.size // z.shape[1]
    if count < 2:
        raise ShapeError("batch statistics need at least 2 elements per channel")
    mu = T.mean(z, axis=axes)
    centered = z - _per_channel(mu, z)
    var = T.mean(centered * centered, axis=axes)
    sigma = T.sqrt(var + VAR_EPS)
    return mu, sigma, centered


def _update_running(layer: NormLayer, mu: np.ndarray, sigma: np.ndarray) -> None:
    if layer.frozen:
        return
    m = layer.momentum
    layer.mu_r = (1.0 - m) * layer.mu_r + m * mu
    layer.sigma_r = (1.0 - m) * layer.sigma_r + m * sigma


def running_norm_forward(z: Tensor, layer: NormLayer) -> Tensor:
    """Eval-mode normalization by the running statistics (both modes)."""
    if np.any(layer.sigma_r <= 0):
        raise DomainError("running std must be positive")
    xhat = (z - _per_channel(Tensor(layer.mu_r), z)) / _per_channel(Tensor(layer.sigma_r), z)
    return _per_channel(layer.gamma, z) * xhat + _per_channel(layer.beta, z)


def batch_norm_forward(z: Tensor, layer: NormLayer, training: bool) -> Tensor:
    if not training:
        return running_norm_forward(z, layer)
    mu, sigma, centered = _batch_statistics(z)
    xhat = centered / _per_channel(sigma, z)
    _update_running(layer, mu.data, sigma.data)
    return _per_channel(layer.gamma, z) * xhat + _per_channel(layer.beta, z)


def batch_renorm_forward(z: Tensor, layer: NormLayer) -> Tensor:
    """Batch statistics in the graph, running statistics in the value.

    The correction ratios r = sigma / sigma_r and d = (mu - mu_r) / sigma_r are
    constants for differentiation, so the forward value equals
    gamma * (z - mu_r) / sigma_r + beta while gradients see batch statistics.
    """
    if np.any(layer.sigma_r <= 0):
        raise DomainError("running std must be positive")
    mu, sigma, centered = _batch_statistics(z)
    r = sigma.data / layer.sigma_r
    d = (mu.data - layer.mu_r) / layer.sigma_r
    if layer.clip:
        r = np.clip(r, 1.0 / layer.rmax, layer.rmax)
        d = np.clip(d, -layer.dmax, layer.dmax)
    xhat = centered / _per_channel(sigma, z)
    renormed = xhat * _per_channel(Tensor(r), z) + _per_channel(Tensor(d), z)
    _update_running(layer, mu.data, sigma.data)
    return _per_channel(layer.gamma, z) * renormed + _per_channel(layer.beta, z)


@dataclass
class ConvBlock:
    kernel: Tensor
    bias: Tensor
    norm: NormLayer
    relu: bool = True

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.bias, *self.norm.parameters()]


class FeatureExtractor:
    """Stack of 3x3 conv + norm (+ relu) blocks mapping C x H x W to H x W x d."""

    def __init__(self, layers: Sequence[ConvBlock]):
        if not layers:
            raise ValueError("feature extractor needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.kernel.shape[0] != nxt.kernel.shape[1]:
                raise ShapeError(
                    f"channel mismatch between layers: {prev.kernel.shape[0]} -> {nxt.kernel.shape[1]}"
                )
        self.layers = list(layers)

    @classmethod
    def create(
        cls,
        in_channels: int = 3,
        hidden: Sequence[int] = (16, 16),
        feature_dim: int = 16,
        rng: Optional[np.random.Generator] = None,
        norm_momentum: float = 0.1,
        final_relu: bool = False,
    ) -> "FeatureExtractor":
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [in_channels, *hidden, feature_dim]
        layers = []
        for i, (cin, cout) in enumerate(zip(widths, widths[1:])):
            std = np.sqrt(2.0 / (cin * 9))
            last = i == len(widths) - 2
            layers.append(
                ConvBlock(
                    kernel=Tensor(rng.normal(0.0, std, (cout, cin, 3, 3)), requires_grad=True),
                    bias=Tensor(np.zeros(cout), requires_grad=True),
                    norm=NormLayer(cout, momentum=norm_momentum),
                    relu=final_relu if last else True,
                )
            )
        return cls(layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].kernel.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].kernel.shape[0]

    @property
    def norm_layers(self) -> list[NormLayer]:
        return [layer.norm for layer in self.layers]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def set_norm_mode(self, mode: NormMode) -> None:
        for norm in self.norm_layers:
            norm.mode = NormMode(mode)

    def freeze_norm_stats(self) -> None:
        for norm in self.norm_layers:
            norm.frozen = True

    def __call__(self, images, training: bool = False) -> Tensor:
        return feature_extract(self, images, training)


def feature_extract(fx: FeatureExtractor, image, training: bool = False) -> Tensor:
    """Per-pixel features, ``(H, W, d)`` for one image or ``(N, H, W, d)`` for a batch."""
    x = T.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1, *x.shape))
    if x.ndim != 4 or x.shape[1] != fx.in_channels:
        raise ShapeError(f"expected {fx.in_channels} input channels, got image of shape {image.shape}")
    h = x
    for layer in fx.layers:
        h = T.conv2d(h, layer.kernel, layer.bias)
        h = layer.norm(h, training)
        if layer.relu:
            h = T.relu(h)
    out = T.transpose(h, (0, 2, 3, 1))
    return T.reshape(out, out.shape[1:]) if single else out


class CosineClassifier:
    """Prototype columns ``W`` (d x |C|) scored by scaled cosine similarity."""

    def __init__(self, weight: Tensor, classes: Sequence[int], tau: float = 10.0, learn_tau: bool = False):
        if weight.ndim != 2 or weight.shape[1] != len(classes):
            raise ShapeError(f"weight shape {weight.shape} does not match {len(classes)} classes")
        if len(set(classes)) != len(classes):
            raise ValueError(f"duplicate classes in {list(classes)}")
        norms = np.sqrt((weight.data**2).sum(axis=0))
        bad = np.flatnonzero(norms < EPS_NORM)
        if bad.size:
            raise DomainError(f"prototype for class {classes[bad[0]]} has degenerate norm")
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.weight = weight
        self.classes = [int(c) for c in classes]
        self.tau = Tensor(float(tau), requires_grad=learn_tau)

    @classmethod
    def random(cls, feature_dim: int, classes: Sequence[int], rng: np.random.Generator, tau: float = 10.0):
        return cls(Tensor(random_unit_columns(feature_dim, len(classes), rng), requires_grad=True), classes, tau)

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    def column_of(self, cls_index: int) -> int:
        return self.classes.index(cls_index)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.tau] if self.tau.requires_grad else [self.weight]


def random_unit_columns(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    w = rng.normal(size=(d, n))
    return w / np.sqrt((w**2).sum(axis=0, keepdims=True))


def cosine_scores(features: Tensor, clf: CosineClassifier) -> Tensor:
    """tau * cos(f_i, w_c) for every pixel i and class c; shape ``(..., |C|)``."""
    d = features.shape[-1]
    if d != clf.feature_dim:
        raise ShapeError(f"feature dim {d} does not match classifier rows {clf.feature_dim}")
    norms = np.sqrt((features.data**2).sum(axis=-1))
    bad = np.argwhere(norms < EPS_NORM)
    if bad.size:
        raise DomainError(f"degenerate feature norm at pixel {tuple(int(i) for i in bad[0])}")
    lead = features.shape[:-1]
    flat = T.l2_normalize(T.reshape(features, (-1, d)), axis=1)
    protos = T.l2_normalize(clf.weight, axis=0)
    cos = T.matmul(flat, protos)
    scores = cos * clf.tau if clf.tau.requires_grad else T.scale(cos, clf.tau.item())
    return T.reshape(scores, (*lead, len(clf.classes)))


def class_probabilities(scores: Tensor) -> Tensor:
    return T.softmax(scores, axis=-1)


class SegModel:
    """phi = g o f: feature extractor followed by the cosine classifier."""

    def __init__(self, extractor: FeatureExtractor, classifier: CosineClassifier):
        if extractor.feature_dim != classifier.feature_dim:
            raise ShapeError("extractor feature dim and classifier rows disagree")
        self.extractor = extractor
        self.classifier = classifier

    @property
    def classes(self) -> list[int]:
        return list(self.classifier.classes)

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + self.classifier.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def features(self, images, training: bool = False) -> Tensor:
        return feature_extract(self.extractor, images, training)

    def forward(self, images, training: bool = False) -> tuple[Tensor, Tensor]:
        feats = self.features(images, training)
        return feats, class_probabilities(cosine_scores(feats, self.classifier))

    def predict(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Arg-max class index per pixel (eval mode)."""
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        lut = np.asarray(self.classes)
        out = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                _, probs = self.forward(Tensor(images[start : start + batch_size]), training=False)
                out.append(lut[probs.data.argmax(axis=-1)])
        pred = np.concatenate(out)
        return pred[0] if single else pred

    def copy(self) -> "SegModel":
        return copy.deepcopy(self)

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.extractor.layers):
            yield f"layers.{i}.kernel", layer.kernel.data
            yield f"layers.{i}.bias", layer.bias.data
            yield f"layers.{i}.norm.gamma", layer.norm.gamma.data
            yield f"layers.{i}.norm.beta", layer.norm.beta.data
            yield f"layers.{i}.norm.mu_r", layer.norm.mu_r
            yield f"layers.{i}.norm.sigma_r", layer.norm.sigma_r
            yield f"layers.{i}.meta", np.array(
                [float(layer.relu), float(layer.norm.mode is NormMode.BATCH_RENORM), float(layer.norm.frozen),
                 layer.norm.momentum]
            )
        yield "classifier.weight", self.classifier.weight.data
        yield "classifier.tau", np.asarray(self.classifier.tau.data)
        yield "classifier.classes", np.asarray(self.classes, dtype=np.float64)


def save_checkpoint(model: SegModel, path) -> None:
    """Flat little-endian format: magic, then (name, rank, dims, float64 data) records."""
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in model.named_parameters():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PIFS1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    params: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise ValueError(f"{path}: truncated payload for {name!r} at byte {pos}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated record at byte {pos}") from exc
    return params


def load_checkpoint(path) -> SegModel:
    params = read_checkpoint(path)
    layers = []
    i = 0
    while f"layers.{i}.kernel" in params:
        relu, renorm, frozen, momentum = params[f"layers.{i}.meta"]
        norm = NormLayer(
            params[f"layers.{i}.kernel"].shape[0],
            mode=NormMode.BATCH_RENORM if renorm else NormMode.BATCH_NORM,
            momentum=float(momentum),
            frozen=bool(frozen),
            gamma=Tensor(params[f"layers.{i}.norm.gamma"], requires_grad=True),
            beta=Tensor(params[f"layers.{i}.norm.beta"], requires_grad=True),
            mu_r=params[f"layers.{i}.norm.mu_r"],
            sigma_r=params[f"layers.{i}.norm.sigma_r"],
        )
        layers.append(
            ConvBlock(
                Tensor(params[f"layers.{i}.kernel"], requires_grad=True),
                Tensor(params[f"layers.{i}.bias"], requires_grad=True),
                norm,
                relu=bool(relu),
            )
        )
        i += 1
    classes = [int(c) for c in params["classifier.classes"]]
    clf = CosineClassifier(
        Tensor(params["classifier.weight"], requires_grad=True), classes, float(params["classifier.tau"])
    )
    return SegModel(FeatureExtractor(layers), clf)
