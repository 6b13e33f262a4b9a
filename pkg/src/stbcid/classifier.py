"""The two-class IQ-frame CNN: architecture, training loop, inference, checkpoints.

The architecture is pinned by its parameter counts (1280, 122960, 2683136,
514): 1280 = 256*(1*1*4+1) forces a 1x4 kernel on the first conv layer;
122960 = 80*(256*2*3+1) forces 2x3 on the second; the stated activation
widths 129 = (128+4)-4+1 and 131 = (129+4)-3+1 force two zero columns of
padding on each side before each convolution. Any deviation from the four
counts is a build failure, so ``parameter_counts`` is part of the public API.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import FRAME_LEN, FrameSet
from .errors import ParameterError, ShapeError
from .tensor_nn import (
    LAYER_KINDS,
    Conv2D,
    Dense,
    Dropout,
    LayerSpec,
    Network,
    adam_init,
    adam_step,
    batch_cross_entropy,
    conv_spec,
    dense_spec,
    dropout_spec,
    flatten_spec,
    relu_spec,
    softmax_spec,
    trace_shapes,
    zeropad_spec,
)

_MASK64 = (1 << 64) - 1

CHECKPOINT_MAGIC = b"STBCNN"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """The file is not a usable checkpoint."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic, truncation, or garbage where structure was expected."""


class CheckpointVersionError(CheckpointError):
    pass


class DescriptorMismatchError(CheckpointError):
    """Stored architecture descriptor disagrees with the expected one."""


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...] = (1, 2, FRAME_LEN)
    n_classes: int = 2


@dataclass
class Model:
    spec: ModelSpec
    net: Network


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    dropout_rate: float = 0.5
    seed: int = 0
    patience: int = 5  # 0 disables early stopping
    weight_dropout: bool = False  # DropConnect variant instead of activation dropout

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.patience < 0:
            raise ParameterError(f"patience must be >= 0, got {self.patience}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


def build_cnn2() -> ModelSpec:
    """The reconstructed four-layer CNN (two conv, two dense) over 1 x 2 x 128 input."""
    layers = (
        zeropad_spec(2),
        conv_spec(256, 1, 4),
        relu_spec(),
        dropout_spec(0.5),
        zeropad_spec(2),
        conv_spec(80, 2, 3),
        relu_spec(),
        dropout_spec(0.5),
        flatten_spec(),
        dense_spec(256),
        relu_spec(),
        dropout_spec(0.5),
        dense_spec(2),
        softmax_spec(),
    )
    return ModelSpec(layers=layers, input_shape=(1, 2, FRAME_LEN), n_classes=2)


def initialize(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Materialize a spec with seeded He/Glorot-uniform weights."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & _MASK64, 0x696E6974]))
    net = Network(spec.layers, spec.input_shape, rng, dtype=dtype)
    if net.output_shape != (spec.n_classes,):
        raise ShapeError(
            f"stack produces {net.output_shape}, expected ({spec.n_classes},)"
        )
    return Model(spec=spec, net=net)


def parameter_counts(model_or_spec) -> list[int]:
    """Trainable parameter count per parameterized layer, in stack order."""
    spec = model_or_spec.spec if isinstance(model_or_spec, Model) else model_or_spec
    model = model_or_spec if isinstance(model_or_spec, Model) else None
    if model is not None:
        return [
            sum(p.size for p in layer.params())
            for layer in model.net.layers
            if layer.params()
        ]
    counts = []
    shape = spec.input_shape
    for ls in spec.layers:
        if ls.kind == "conv2d":
            kh, kw = ls.kernel
            counts.append(ls.filters * (shape[0] * kh * kw) + ls.filters)
        elif ls.kind == "dense":
            counts.append(ls.units * shape[0] + ls.units)
        shape = trace_shapes([ls], shape)[0]
    return counts


def _as_batch(frames: np.ndarray, dtype) -> np.ndarray:
    if frames.ndim != 3 or frames.shape[1:] != (2, FRAME_LEN):
        raise ShapeError(f"frames must be [N, 2, {FRAME_LEN}], got {frames.shape}")
    return frames[:, None, :, :].astype(dtype)


def predict_batch(model: Model, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities, shape [N, 2] (columns P_SM, P_AL)."""
    x = _as_batch(np.asarray(frames), model.net.dtype)
    out = np.empty((x.shape[0], model.spec.n_classes), dtype=np.float64)
    for start in range(0, x.shape[0], batch_size):
        out[start:start + batch_size] = model.net.forward(x[start:start + batch_size])
    return out


def predict(model: Model, frame: np.ndarray) -> tuple[float, float]:
    """Probabilities (P_SM, P_AL) for one 2 x 128 frame; classification is argmax,
    ties broken toward SM."""
    frame = np.asarray(frame)
    if frame.shape == (1, 2, FRAME_LEN):
        frame = frame[0]
    probs = predict_batch(model, frame[None])[0]
    return float(probs[0]), float(probs[1])


def classify(model: Model, frame: np.ndarray) -> int:
    p_sm, p_al = predict(model, frame)
    return 1 if p_al > p_sm else 0


def _eval_metrics(model: Model, x: np.ndarray, onehot: np.ndarray, labels: np.ndarray,
                  batch_size: int) -> tuple[float, float]:
    total_loss = 0.0
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        probs = model.net.forward(x[sl])
        total_loss += batch_cross_entropy(probs, onehot[sl]) * (probs.shape[0])
        pred = (probs[:, 1] > probs[:, 0]).astype(np.int64)  # ties go to SM
        correct += int((pred == labels[sl]).sum())
    n = x.shape[0]
    return total_loss / n, correct / n


def _weight_dropout_targets(net: Network) -> list:
    """Conv weights plus the first dense layer's weights (DropConnect variant)."""
    targets = [layer for layer in net.layers if isinstance(layer, Conv2D)]
    dense = [layer for layer in net.layers if isinstance(layer, Dense)]
    if dense:
        targets.append(dense[0])
    return targets


def train(model: Model, train_set: FrameSet, val_set: FrameSet,
          cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """Minibatch Adam on softmax cross-entropy with seeded shuffling.

    Tracks validation loss each epoch, stops early after ``patience`` epochs
    without improvement, and restores the best-validation parameters before
    returning.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ParameterError("train and validation sets must be non-empty")
    dtype = model.net.dtype
    x_train = _as_batch(train_set.frames, dtype)
    x_val = _as_batch(val_set.frames, dtype)
    y_train = np.eye(2, dtype=dtype)[train_set.schemes]
    y_val = np.eye(2, dtype=dtype)[val_set.schemes]
    val_labels = val_set.schemes.astype(np.int64)

    dropout_layers = [layer for layer in model.net.layers if isinstance(layer, Dropout)]
    for layer in dropout_layers:
        layer.rate = 0.0 if cfg.weight_dropout else cfg.dropout_rate
    wd_targets = _weight_dropout_targets(model.net) if cfg.weight_dropout else []

    params = model.net.parameters()
    state = adam_init(params, lr=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & _MASK64, 0x73687566]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & _MASK64, 0x64726F70]))

    history = TrainHistory()
    best_val = np.inf
    best_params = [p.copy() for p in params]
    bad_epochs = 0
    n = x_train.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if wd_targets:
                saved = [t.w.copy() for t in wd_targets]
                masks = [
                    (dropout_rng.random(t.w.shape) >= cfg.dropout_rate).astype(dtype)
                    / dtype.type(1.0 - cfg.dropout_rate)
                    for t in wd_targets
                ]
                for t, m in zip(wd_targets, masks):
                    t.w *= m
            loss, grads = model.net.loss_and_grads(
                x_train[idx], y_train[idx], train=True, rng=dropout_rng
            )
            if wd_targets:
                for t, m, s in zip(wd_targets, masks, saved):
                    t.gw *= m
                    t.w[...] = s
            adam_step(params, grads, state)
            running += loss * idx.size
        train_loss = running / n
        val_loss, val_acc = _eval_metrics(model, x_val, y_val, val_labels, cfg.batch_size)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        if val_loss < best_val:
            best_val = val_loss
            best_params = [p.copy() for p in params]
            history.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if cfg.patience and bad_epochs >= cfg.patience:
                history.stopped_early = True
                break
    for p, bp in zip(params, best_params):
        p[...] = bp
    return model, history


# ---------------------------------------------------------------------------
# checkpoints

_DESC = struct.Struct("<BIIIf")  # kind, three ints, rate


def _layer_descriptor(spec: LayerSpec) -> bytes:
    kind = LAYER_KINDS.index(spec.kind)
    a = b = c = 0
    rate = 0.0
    if spec.kind == "conv2d":
        a, (b, c) = spec.filters, spec.kernel
    elif spec.kind == "dense":
        a = spec.units
    elif spec.kind == "zeropad":
        a = spec.pad
    elif spec.kind == "dropout":
        rate = spec.rate
    return _DESC.pack(kind, a, b, c, rate)


def _spec_from_descriptor(raw: bytes) -> LayerSpec:
    kind_idx, a, b, c, rate = _DESC.unpack(raw)
    if kind_idx >= len(LAYER_KINDS):
        raise CorruptCheckpointError(f"unknown layer kind index {kind_idx}")
    kind = LAYER_KINDS[kind_idx]
    if kind == "conv2d":
        return conv_spec(a, b, c)
    if kind == "dense":
        return dense_spec(a)
    if kind == "zeropad":
        return zeropad_spec(a)
    if kind == "dropout":
        return dropout_spec(round(float(rate), 6))
    return LayerSpec(kind=kind)


def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, architecture descriptors, then f32 parameter tensors."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    shape = model.spec.input_shape
    parts.append(struct.pack("<B", len(shape)))
    parts.append(struct.pack(f"<{len(shape)}I", *shape))
    parts.append(struct.pack("<I", len(model.spec.layers)))
    parts += [_layer_descriptor(ls) for ls in model.spec.layers]
    tensors = model.net.parameters()
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def load_checkpoint(path, expected: ModelSpec | None = None) -> Model:
    """Rebuild a model bit-exactly; optionally insist on a particular architecture."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<H", r.take(2))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    (ndim,) = struct.unpack("<B", r.take(1))
    input_shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
    (n_layers,) = struct.unpack("<I", r.take(4))
    try:
        specs = tuple(_spec_from_descriptor(r.take(_DESC.size)) for _ in range(n_layers))
    except ParameterError as e:
        raise CorruptCheckpointError(f"{path}: invalid layer descriptor ({e})") from None
    try:
        net = Network(specs, input_shape, np.random.default_rng(0), dtype=np.float32)
    except (ParameterError, ShapeError) as e:
        raise CorruptCheckpointError(f"{path}: descriptors do not form a network ({e})") from None
    spec = ModelSpec(layers=specs, input_shape=input_shape, n_classes=net.output_shape[0])
    (n_tensors,) = struct.unpack("<I", r.take(4))
    params = net.parameters()
    if n_tensors != len(params):
        raise DescriptorMismatchError(
            f"{path}: {n_tensors} stored tensors, architecture has {len(params)}"
        )
    for p in params:
        (tnd,) = struct.unpack("<B", r.take(1))
        tshape = struct.unpack(f"<{tnd}I", r.take(4 * tnd))
        if tshape != p.shape:
            raise DescriptorMismatchError(
                f"{path}: stored tensor shape {tshape} != expected {p.shape}"
            )
        raw = r.take(4 * int(np.prod(tshape)))
        p[...] = np.frombuffer(raw, dtype="<f4").reshape(tshape)
    if r.pos != len(r.data):
        raise CorruptCheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    model = Model(spec=spec, net=net)
    if expected is not None and (
        spec.layers != expected.layers or spec.input_shape != expected.input_shape
    ):
        raise DescriptorMismatchError(f"{path}: architecture differs from the expected spec")
    return model
