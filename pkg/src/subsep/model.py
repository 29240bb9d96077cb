"""Encoder / CSSE / decoder assembly and the composite training loss.

The CSSE layer is a trainable N x N coefficient matrix, constrained to be
block-diagonal by class with a zero diagonal, sitting between the flattened
encoder features and the decoder. The loss combines reconstruction,
self-expression residual, entrywise l1 on the coefficients, and pairwise
cross-class feature correlation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SUBSEP1"


@dataclass(frozen=True)
class LayerSpec:
    """One conv layer: output channels, square kernel extent, ReLU flag."""

    channels: int
    kernel: int
    relu: bool = False

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd extent")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class FeatureMatrix:
    """Encoder outputs, one column per sample, columns grouped contiguously
    by class in label order."""

    matrix: Tensor  # (feature_dim, N)
    labels: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.matrix, Tensor):
            self.matrix = T.constant(np.asarray(self.matrix, dtype=np.float64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.matrix.shape[1],):
                raise ValueError("one label per column required")
            if np.any(np.diff(self.labels) < 0):
                raise ValueError("columns must be grouped by ascending class id")

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_samples(self) -> int:
        return self.matrix.shape[1]

    def class_sizes(self) -> list[int]:
        if self.labels is None:
            raise ValueError("feature matrix carries no labels")
        return np.bincount(self.labels).tolist()

    def class_block(self, class_id: int) -> np.ndarray:
        start, stop = class_column_range(self.labels, class_id)
        return self.values[:, start:stop]


def class_column_range(labels: np.ndarray, class_id: int) -> tuple[int, int]:
    idx = np.flatnonzero(labels == class_id)
    if idx.size == 0:
        raise ValueError(f"no samples with class id {class_id}")
    return int(idx[0]), int(idx[-1]) + 1


def csse_mask(labels: np.ndarray) -> np.ndarray:
    """0/1 mask of trainable CSSE entries: same-class pairs, diagonal off."""
    labels = np.asarray(labels)
    mask = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(mask, 0.0)
    return mask


@dataclass
class ConvLayer:
    weight: Tensor  # (k, k, in_channels, out_channels)
    bias: Tensor
    relu: bool


class ModelParams:
    """Parameters and static shape bookkeeping for one model instance.

    `encoder_hw[j]` is the spatial extent entering encoder layer j;
    `encoder_hw[-1]` is the feature-side extent. The decoder mirrors the
    encoder: reversed channel order, transposed convs, same kernels, each
    restoring the recorded pre-conv extent.
    """

    def __init__(self, arch: list[LayerSpec], input_shape: tuple[int, int],
                 labels: np.ndarray, encoder: list[ConvLayer],
                 decoder: list[ConvLayer], csse: Tensor,
                 decoder_relu: list[bool]):
        self.arch = list(arch)
        self.input_shape = (int(input_shape[0]), int(input_shape[1]))
        self.labels = np.asarray(labels, dtype=np.int64)
        self.encoder = encoder
        self.decoder = decoder
        self.csse = csse
        self.decoder_relu = list(decoder_relu)
        self.class_sizes = np.bincount(self.labels).tolist()
        self.mask = csse_mask(self.labels)
        hw = [self.input_shape]
        for _ in arch:
            hw.append((T.conv_output_extent(hw[-1][0]),
                       T.conv_output_extent(hw[-1][1])))
        self.encoder_hw = hw

    @property
    def n_train(self) -> int:
        return self.labels.size

    @property
    def feature_dim(self) -> int:
        h, w = self.encoder_hw[-1]
        return h * w * self.arch[-1].channels

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for j, layer in enumerate(self.encoder):
            params[f"encoder.{j}.weight"] = layer.weight
            params[f"encoder.{j}.bias"] = layer.bias
        params["csse"] = self.csse
        for j, layer in enumerate(self.decoder):
            params[f"decoder.{j}.weight"] = layer.weight
            params[f"decoder.{j}.bias"] = layer.bias
        return params

    def assert_csse_structure(self) -> None:
        """Raise unless every off-block and diagonal CSSE entry is exactly 0."""
        data = self.csse.data
        if np.any(data[self.mask == 0.0] != 0.0):
            raise ValueError("CSSE matrix violates the block/diagonal mask")


def _xavier_uniform(rng: np.random.Generator, k: int, c_in: int,
                    c_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (k * k * c_in + k * k * c_out))
    return rng.uniform(-bound, bound, size=(k, k, c_in, c_out))


def build_model(arch: list[LayerSpec], input_shape: tuple[int, int],
                labels: np.ndarray, seed: int,
                decoder_relu: list[bool] | None = None) -> ModelParams:
    """Build a model with Xavier-initialized convs and an all-zero CSSE
    matrix whose mask is derived from `labels` (sorted, >= 2 per class)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size < 2:
        raise ValueError("labels must be a 1-D array of at least two samples")
    if np.any(np.diff(labels) < 0):
        raise ValueError("labels must be sorted ascending by class")
    sizes = np.bincount(labels)
    if np.any(sizes < 2):
        bad = int(np.argmin(sizes))
        raise ValueError(
            f"class {bad} has {int(sizes[bad])} sample(s); self-expression "
            "requires at least 2 per class")
    if not arch:
        raise ValueError("architecture needs at least one conv layer")
    if decoder_relu is None:
        decoder_relu = [spec.relu for spec in reversed(arch)]
    if len(decoder_relu) != len(arch):
        raise ValueError("decoder_relu must have one flag per layer")

    rng = np.random.default_rng(seed)
    channels = [1] + [spec.channels for spec in arch]
    encoder = []
    for j, spec in enumerate(arch):
        w = T.parameter(_xavier_uniform(rng, spec.kernel, channels[j], channels[j + 1]))
        b = T.parameter(np.zeros(channels[j + 1]))
        encoder.append(ConvLayer(w, b, spec.relu))
    decoder = []
    for i in range(len(arch)):
        j = len(arch) - 1 - i  # encoder layer being inverted
        k = arch[j].kernel
        w = T.parameter(_xavier_uniform(rng, k, channels[j], channels[j + 1]))
        b = T.parameter(np.zeros(channels[j]))
        decoder.append(ConvLayer(w, b, decoder_relu[i]))
    csse = T.parameter(np.zeros((labels.size, labels.size)))
    return ModelParams(arch, input_shape, labels, encoder, decoder, csse,
                       decoder_relu)


def _as_image_tensor(batch, input_shape: tuple[int, int]) -> Tensor:
    t = batch if isinstance(batch, Tensor) else T.constant(np.asarray(batch, dtype=np.float64))
    if t.data.ndim == 3:
        t = T.reshape(t, (t.shape[0], t.shape[1], t.shape[2], 1))
    if t.data.ndim != 4 or t.shape[3] != 1:
        raise ValueError(f"expected (N, H, W[, 1]) batch, got {t.shape}")
    if (t.shape[1], t.shape[2]) != tuple(input_shape):
        raise ValueError(f"batch spatial shape {t.shape[1:3]} does not match "
                         f"model input {tuple(input_shape)}")
    return t


def encode(model: ModelParams, batch, labels: np.ndarray | None = None) -> FeatureMatrix:
    """Run the conv stack and flatten each sample into one feature column."""
    h = _as_image_tensor(batch, model.input_shape)
    for layer in model.encoder:
        h = T.bias_add(T.conv2d_stride(h, layer.weight), layer.bias)
        if layer.relu:
            h = T.relu(h)
    n = h.shape[0]
    flat = T.reshape(h, (n, model.feature_dim))
    return FeatureMatrix(T.transpose2d(flat), labels)


def csse_apply(model: ModelParams, feats: FeatureMatrix) -> FeatureMatrix:
    """Multiply features by the masked coefficient matrix: X -> X @ C.

    Columns of the output only ever mix same-class input columns because
    every off-block entry is pinned to exact zero.
    """
    if feats.n_samples != model.n_train:
        raise ValueError(f"feature matrix has {feats.n_samples} columns; "
                         f"CSSE layer was built for {model.n_train}")
    if feats.labels is not None and not np.array_equal(feats.labels, model.labels):
        raise ValueError("feature matrix label layout differs from the model's")
    model.assert_csse_structure()
    return FeatureMatrix(T.matmul(feats.matrix, model.csse), feats.labels)


def decode(model: ModelParams, feats: FeatureMatrix) -> Tensor:
    """Unflatten feature columns and run the transposed-conv stack back to
    an (N, H, W) batch."""
    if feats.feature_dim != model.feature_dim:
        raise ValueError(f"feature length {feats.feature_dim} does not match "
                         f"model feature dim {model.feature_dim}")
    n = feats.n_samples
    hm, wm = model.encoder_hw[-1]
    h = T.reshape(T.transpose2d(feats.matrix), (n, hm, wm, model.arch[-1].channels))
    m = len(model.decoder)
    for i, layer in enumerate(model.decoder):
        target_hw = model.encoder_hw[m - 1 - i]
        h = T.bias_add(T.conv2d_transpose_stride(h, layer.weight, target_hw),
                       layer.bias)
        if layer.relu:
            h = T.relu(h)
    return T.reshape(h, (n, *model.input_shape))


def self_expression_residual(feats: FeatureMatrix, csse_out: FeatureMatrix) -> Tensor:
    """Sum over classes of ||X_i - X_i C_i||_F^2.

    With the block mask in force, class-i output columns depend only on
    class-i inputs, so the per-class sum equals one Frobenius norm of the
    full residual matrix.
    """
    return T.frobenius_sq(T.sub(feats.matrix, csse_out.matrix))


def separation_sum(feats: FeatureMatrix) -> Tensor:
    """Sum over class pairs i<j of ||X_i^T X_j||_F^2."""
    if feats.labels is None:
        raise ValueError("separation term needs labeled features")
    sizes = feats.class_sizes()
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    blocks = [T.slice_columns(feats.matrix, int(offsets[i]), int(offsets[i + 1]))
              for i in range(len(sizes))]
    total: Tensor | None = None
    for i in range(len(blocks)):
        for j in range(i + 1, len(blocks)):
            term = T.frobenius_sq(T.matmul(blocks[i], blocks[j], transpose_a=True))
            total = term if total is None else T.add(total, term)
    return total if total is not None else T.constant(0.0)


@dataclass
class LossBreakdown:
    recon: Tensor
    selfexpr: Tensor
    l1: Tensor
    separation: Tensor
    total: Tensor

    def as_floats(self) -> tuple[float, float, float, float, float]:
        return (self.recon.item(), self.selfexpr.item(), self.l1.item(),
                self.separation.item(), self.total.item())


def loss_terms(model: ModelParams, batch, weights: LossWeights) -> LossBreakdown:
    """Forward pass producing the four loss terms and their weighted total.

    recon      = 0.5 ||Y - decode(X C)||_F^2
    selfexpr   = sum_i ||X_i - X_i C_i||_F^2
    l1         = ||C||_1 (masked entries are exact zeros, contributing 0)
    separation = sum_{i<j} ||X_i^T X_j||_F^2
    total      = recon + l1w.lambda1 * selfexpr + lambda2 * l1 + lambda3 * sep
    """
    y = _as_image_tensor(batch, model.input_shape)
    if y.shape[0] != model.n_train:
        raise ValueError(f"batch of {y.shape[0]} samples; model was built "
                         f"for {model.n_train}")
    y_flat = T.reshape(y, (y.shape[0], *model.input_shape))
    feats = encode(model, y, labels=model.labels)
    expressed = csse_apply(model, feats)
    recon = T.scalar_mul(0.5, T.frobenius_sq(T.sub(y_flat, decode(model, expressed))))
    selfexpr = self_expression_residual(feats, expressed)
    l1 = T.l1_sum(model.csse)
    separation = separation_sum(feats)
    total = T.add(recon, T.add(T.scalar_mul(weights.lambda1, selfexpr),
                               T.add(T.scalar_mul(weights.lambda2, l1),
                                     T.scalar_mul(weights.lambda3, separation))))
    return LossBreakdown(recon, selfexpr, l1, separation, total)


def count_parameters(arch: list[LayerSpec], class_sizes: list[int]) -> tuple[int, int]:
    """(conv weight count over encoder+decoder, trainable CSSE entry count).

    Biases are excluded from the conv count; the CSSE count is the number of
    same-class off-diagonal entries, sum_i (n_i^2 - n_i).
    """
    channels = [1] + [spec.channels for spec in arch]
    enc = sum(spec.kernel ** 2 * channels[j] * channels[j + 1]
              for j, spec in enumerate(arch))
    csse = sum(int(n) ** 2 - int(n) for n in class_sizes)
    return 2 * enc, csse


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "SUBSEP1" | uint32 LE header length | UTF-8 JSON header | raw tensors.
# The header lists architecture, input shape, class sizes, and every tensor's
# name and shape in order; tensor payloads are little-endian float64, C order,
# concatenated in that same order.

def save_checkpoint(model: ModelParams, path) -> None:
    params = model.named_parameters()
    header = {
        "format_version": 1,
        "input_shape": list(model.input_shape),
        "encoder": [{"channels": s.channels, "kernel": s.kernel, "relu": s.relu}
                    for s in model.arch],
        "decoder_relu": list(model.decoder_relu),
        "class_sizes": [int(n) for n in model.class_sizes],
        "tensors": [{"name": name, "shape": list(p.shape)}
                    for name, p in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    arch = [LayerSpec(e["channels"], e["kernel"], e["relu"])
            for e in header["encoder"]]
    class_sizes = header["class_sizes"]
    labels = np.repeat(np.arange(len(class_sizes)), class_sizes)
    model = build_model(arch, tuple(header["input_shape"]), labels, seed=0,
                        decoder_relu=list(header["decoder_relu"]))
    params = model.named_parameters()
    expected = [(e["name"], tuple(e["shape"])) for e in header["tensors"]]
    actual = [(name, p.shape) for name, p in params.items()]
    if expected != actual:
        raise ValueError(f"{path}: tensor table does not match architecture")
    for name, p in params.items():
        count = p.data.size
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += count * 8
        p.data = arr.reshape(p.shape).astype(np.float64)
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensor payload")
    return model
