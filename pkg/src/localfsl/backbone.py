"""Four-block convolutional extractor and the per-location 1x1 classifier.

Each block is ``3x3 conv -> per-channel normalisation -> ReLU -> 2x2 average
downsample``, so a ``s x s`` image becomes a ``d x s/16 x s/16`` map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CorruptImage, IOFailure, ShapeMismatch

NUM_BLOCKS = 4
BN_EPS = 1e-5
CHECKPOINT_MAGIC = b"LLS1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    in_channels: int = 1
    widths: tuple = (16, 32, 64, 64)
    side: int = 32
    num_classes: int = 20
    kernel: int = 3

    def __post_init__(self):
        if len(self.widths) != NUM_BLOCKS:
            raise ShapeMismatch(f"exactly {NUM_BLOCKS} blocks are required")
        if self.side % (2 ** NUM_BLOCKS):
            raise ShapeMismatch(f"image side {self.side} is not a multiple of 16")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def map_side(self) -> int:
        return self.side // 2 ** NUM_BLOCKS


DESK_ARCH = Arch()
FULL_ARCH = Arch(in_channels=3, widths=(64, 128, 256, 512), side=80, num_classes=64)


def learnable_names(arch: Arch) -> list[str]:
    names = []
    for b in range(NUM_BLOCKS):
        names += [f"block{b}.conv", f"block{b}.gain", f"block{b}.shift"]
    return names + ["classifier.W"]


def buffer_names(arch: Arch) -> list[str]:
    names = []
    for b in range(NUM_BLOCKS):
        names += [f"block{b}.running_mean", f"block{b}.running_var"]
    return names


@dataclass
class BackboneParams:
    """All weights of the extractor plus the classifier ``W`` (d x c)."""

    arch: Arch
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(learnable_names(self.arch) + buffer_names(self.arch)) - set(self.tensors)
        if missing:
            raise ShapeMismatch(f"missing parameter tensors: {sorted(missing)}")
        W = self.tensors["classifier.W"]
        if W.shape != (self.arch.feature_dim, self.arch.num_classes):
            raise ShapeMismatch(f"classifier W has shape {W.shape}")

    @property
    def W(self) -> np.ndarray:
        return self.tensors["classifier.W"]

    def learnable(self) -> dict:
        return {k: self.tensors[k] for k in learnable_names(self.arch)}

    def num_learnable(self) -> int:
        return int(sum(v.size for v in self.learnable().values()))

    def copy(self) -> "BackboneParams":
        return BackboneParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "BackboneParams":
        return BackboneParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(arch: Arch = DESK_ARCH, seed: int = 0, dtype=np.float32) -> BackboneParams:
    """He-normal conv kernels, unit gain, zero shift, and a classifier drawn
    uniformly from [-1/sqrt(d), 1/sqrt(d)]."""
    rng = np.random.default_rng(seed)
    tensors = {}
    c_in = arch.in_channels
    k = arch.kernel
    for b, width in enumerate(arch.widths):
        std = np.sqrt(2.0 / (c_in * k * k))
        tensors[f"block{b}.conv"] = rng.normal(0.0, std, (width, c_in, k, k))
        tensors[f"block{b}.gain"] = np.ones(width)
        tensors[f"block{b}.shift"] = np.zeros(width)
        tensors[f"block{b}.running_mean"] = np.zeros(width)
        tensors[f"block{b}.running_var"] = np.ones(width)
        c_in = width
    d = arch.feature_dim
    bound = 1.0 / np.sqrt(d)
    tensors["classifier.W"] = rng.uniform(-bound, bound, (d, arch.num_classes))
    return BackboneParams(arch, {n: v.astype(dtype) for n, v in tensors.items()})


def forward(weights: dict, buffers: dict, images, train: bool = False):
    """Run the four blocks on a batch ``(n, ch, s, s)``.

    ``weights`` maps learnable names to arrays or tape leaves. In training
    mode the normalisation uses batch statistics, which are returned as
    ``[(mean, var), ...]`` so the caller can update running buffers.
    """
    x = images if isinstance(images, ad.Tensor) else ad.Tensor(images)
    stats = []
    for b in range(NUM_BLOCKS):
        x = ad.conv2d(x, weights[f"block{b}.conv"], stride=1, pad=1)
        if train:
            x, mu, var = ad.batch_norm(x, weights[f"block{b}.gain"], weights[f"block{b}.shift"], eps=BN_EPS)
            stats.append((mu, var))
        else:
            x, _, _ = ad.batch_norm(
                x,
                weights[f"block{b}.gain"],
                weights[f"block{b}.shift"],
                mean=buffers[f"block{b}.running_mean"],
                var=buffers[f"block{b}.running_var"],
                eps=BN_EPS,
            )
        x = ad.relu(x)
        x = ad.avg_pool2(x)
    return x, stats


def _check_images(params: BackboneParams, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    arch = params.arch
    if images.ndim != 4 or images.shape[1:] != (arch.in_channels, arch.side, arch.side):
        raise ShapeMismatch(
            f"expected images (n, {arch.in_channels}, {arch.side}, {arch.side}), got {images.shape}"
        )
    return images.astype(params.W.dtype, copy=False)


def extract_features(params: BackboneParams, images, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode feature maps for a batch of images, ``(n, d, w, h)``."""
    images = _check_images(params, images)
    buffers = {k: params.tensors[k] for k in buffer_names(params.arch)}
    out = []
    for start in range(0, len(images), batch_size):
        fmap, _ = forward(params.tensors, buffers, images[start : start + batch_size])
        out.append(fmap.data)
    if not out:
        a = params.arch
        return np.zeros((0, a.feature_dim, a.map_side, a.map_side), dtype=params.W.dtype)
    return np.concatenate(out)


@dataclass
class FeatureMap:
    """A ``d x w x h`` last-block map of one image."""

    values: np.ndarray
    source_id: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ShapeMismatch(f"feature map must be d x w x h, got {self.values.shape}")

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape


def forward_features(params: BackboneParams, image, source_id=None) -> FeatureMap:
    """Feature map of a single ``ch x s x s`` image."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeMismatch(f"expected a ch x s x s image, got {image.shape}")
    return FeatureMap(extract_features(params, image[None])[0], source_id)


def local_logits(W, fmap) -> np.ndarray:
    return ad.conv1x1(np.asarray(fmap), np.asarray(W)).data


def local_classify(params, fmap) -> np.ndarray:
    """Class posteriors at every location: ``c x w x h`` (or batched).

    ``params`` may be a :class:`BackboneParams` or the raw ``d x c`` matrix.
    """
    W = params.W if isinstance(params, BackboneParams) else np.asarray(params)
    x = np.asarray(fmap)
    if x.ndim not in (3, 4) or x.shape[-3] != W.shape[0]:
        raise ShapeMismatch(f"map {x.shape} does not match classifier {W.shape}")
    return ad.softmax(local_logits(W, x), axis=-3).data


def global_feature(fmap) -> np.ndarray:
    """Spatially averaged feature vector (the pooled baseline path)."""
    return ad.global_avg_pool(np.asarray(fmap)).data


# --------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(params: BackboneParams, path) -> None:
    """Write ``LLS1`` | version u32 | count u32 | records, little-endian."""
    records = [("arch.side", np.array([params.arch.side], dtype=np.float32))]
    for name in learnable_names(params.arch) + buffer_names(params.arch):
        records.append((name, params.tensors[name]))
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, dtype=np.float32) -> BackboneParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptImage(f"{path} is not an LLS1 checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CorruptImage(f"unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            tensors[name] = arr.astype(dtype)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptImage(f"truncated checkpoint {path}") from exc
    side = int(tensors.pop("arch.side")[0])
    convs = [tensors[f"block{b}.conv"] for b in range(NUM_BLOCKS)]
    arch = Arch(
        in_channels=convs[0].shape[1],
        widths=tuple(c.shape[0] for c in convs),
        side=side,
        num_classes=tensors["classifier.W"].shape[1],
        kernel=convs[0].shape[2],
    )
    return BackboneParams(arch, tensors)
