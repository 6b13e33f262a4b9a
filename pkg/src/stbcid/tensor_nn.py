"""Minimal conv/dense network engine: exact backprop, Adam, finite-difference checks.

Layers operate on batched arrays (leading batch axis); the single-sample
functional forms used throughout the docs and tests are thin wrappers. The
engine is deliberately small: stride-1 valid convolutions, column-only zero
padding, inverted dropout, softmax + cross-entropy fused in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError

LAYER_KINDS = ("conv2d", "dense", "relu", "softmax", "dropout", "zeropad", "flatten")

LOSS_CLAMP = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description; only the fields its kind uses are set."""

    kind: str
    filters: int | None = None
    kernel: tuple[int, int] | None = None
    units: int | None = None
    rate: float | None = None
    pad: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (
            not self.filters or not self.kernel or min(self.kernel) < 1
        ):
            raise ParameterError("conv2d spec needs filters and a kernel with dims >= 1")
        if self.kind == "dense" and not self.units:
            raise ParameterError("dense spec needs units")
        if self.kind == "dropout" and not 0.0 <= (self.rate or 0.0) < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.kind == "zeropad" and (self.pad is None or self.pad < 0):
            raise ParameterError("zeropad spec needs pad >= 0")


def conv_spec(filters: int, kh: int, kw: int) -> LayerSpec:
    return LayerSpec(kind="conv2d", filters=filters, kernel=(kh, kw))


def dense_spec(units: int) -> LayerSpec:
    return LayerSpec(kind="dense", units=units)


def relu_spec() -> LayerSpec:
    return LayerSpec(kind="relu")


def softmax_spec() -> LayerSpec:
    return LayerSpec(kind="softmax")


def dropout_spec(rate: float) -> LayerSpec:
    return LayerSpec(kind="dropout", rate=rate)


def zeropad_spec(pad: int) -> LayerSpec:
    return LayerSpec(kind="zeropad", pad=pad)


def flatten_spec() -> LayerSpec:
    return LayerSpec(kind="flatten")


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Forward/backward node. backward() consumes state cached by forward()."""

    spec: LayerSpec

    def forward(self, x: np.ndarray, train: bool = False, rng=None, sign_trace=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[B, C, H, W] -> [B*OH*OW, C*kh*kw] patch matrix (one copy)."""
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, c, oh, ow = view.shape[:4]
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)


class Conv2D(Layer):
    """Stride-1 valid cross-correlation over channel-first [B, C, H, W] input.

    One im2col plus one GEMM per pass; the patch matrix is cached between
    forward and backward.
    """

    def __init__(self, in_channels: int, spec: LayerSpec, rng: np.random.Generator,
                 dtype=np.float32, init: str = "he"):
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = in_channels * kh * kw
        if init == "he":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + spec.filters))
        self.w = rng.uniform(-limit, limit, size=(spec.filters, in_channels, kh, kw)).astype(dtype)
        self.b = np.zeros(spec.filters, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cols = None
        self._x_shape = None

    def forward(self, x, train=False, rng=None, sign_trace=None):
        f, c, kh, kw = self.w.shape
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeError(f"conv2d expects [B, {c}, H, W], got {x.shape}")
        b, _, h, w = x.shape
        if kh > h or kw > w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        oh, ow = h - kh + 1, w - kw + 1
        cols = _im2col(x, kh, kw)
        out = cols @ self.w.reshape(f, -1).T + self.b
        self._cols = cols
        self._x_shape = x.shape
        return np.ascontiguousarray(out.reshape(b, oh, ow, f).transpose(0, 3, 1, 2))

    def backward(self, grad):
        f, c, kh, kw = self.w.shape
        b, _, oh, ow = grad.shape
        _, _, h, w = self._x_shape
        dy = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(-1, f)
        self.gb[...] = dy.sum(axis=0)
        self.gw[...] = (dy.T @ self._cols).reshape(self.w.shape)
        if h * w * f < oh * ow * c:
            # full correlation of padded grad with the flipped kernel: one GEMM,
            # cheaper than col2im scatter when dx has many channels
            pad = np.pad(grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wf = self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            out = _im2col(pad, kh, kw) @ wf.T
            return np.ascontiguousarray(out.reshape(b, h, w, c).transpose(0, 3, 1, 2))
        dcols = (dy @ self.w.reshape(f, -1)).reshape(b, oh, ow, c, kh, kw)
        dx = np.zeros(self._x_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.gw, self.gb]


class Dense(Layer):
    def __init__(self, in_features: int, spec: LayerSpec, rng: np.random.Generator,
                 dtype=np.float32, init: str = "he"):
        self.spec = spec
        if init == "he":
            limit = np.sqrt(6.0 / in_features)
        else:
            limit = np.sqrt(6.0 / (in_features + spec.units))
        self.w = rng.uniform(-limit, limit, size=(spec.units, in_features)).astype(dtype)
        self.b = np.zeros(spec.units, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, train=False, rng=None, sign_trace=None):
        if x.ndim != 2 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(f"dense expects [B, {self.w.shape[1]}], got {x.shape}")
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, grad):
        self.gw[...] = grad.T @ self._x
        self.gb[...] = grad.sum(axis=0)
        return grad @ self.w

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.gw, self.gb]


class ReLU(Layer):
    def __init__(self, spec: LayerSpec | None = None):
        self.spec = spec or relu_spec()
        self._mask = None

    def forward(self, x, train=False, rng=None, sign_trace=None):
        self._mask = x > 0
        if sign_trace is not None:
            sign_trace.append(self._mask.copy())
        return np.where(self._mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad):
        return np.where(self._mask, grad, np.zeros((), dtype=grad.dtype))


class Softmax(Layer):
    def __init__(self, spec: LayerSpec | None = None):
        self.spec = spec or softmax_spec()
        self._p = None

    def forward(self, x, train=False, rng=None, sign_trace=None):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self._p = e / e.sum(axis=-1, keepdims=True)
        return self._p

    def backward(self, grad):
        p = self._p
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-rate); eval mode is identity."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.rate = spec.rate  # mutable so a training config can override it
        self._scale_mask = None

    def forward(self, x, train=False, rng=None, sign_trace=None):
        rate = self.rate
        if not train or rate == 0.0:
            self._scale_mask = None
            return x
        if rng is None:
            raise ParameterError("train-mode dropout needs an rng")
        keep = rng.random(x.shape, dtype=np.float32) >= rate
        self._scale_mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
        return x * self._scale_mask

    def backward(self, grad):
        if self._scale_mask is None:
            return grad
        return grad * self._scale_mask


class ZeroPad(Layer):
    """Pads the width axis with spec.pad zero columns on each side."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def forward(self, x, train=False, rng=None, sign_trace=None):
        if x.ndim != 4:
            raise ShapeError(f"zeropad expects [B, C, H, W], got {x.shape}")
        p = self.spec.pad
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (0, 0), (p, p)))

    def backward(self, grad):
        p = self.spec.pad
        return grad if p == 0 else grad[:, :, :, p:-p]


class Flatten(Layer):
    def __init__(self, spec: LayerSpec | None = None):
        self.spec = spec or flatten_spec()
        self._shape = None

    def forward(self, x, train=False, rng=None, sign_trace=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


# ---------------------------------------------------------------------------
# network assembly


def trace_shapes(specs, input_shape) -> list[tuple[int, ...]]:
    """Propagate the (batchless) activation shape through a spec stack."""
    shape = tuple(input_shape)
    out = []
    for spec in specs:
        if spec.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"conv2d needs a [C, H, W] input, got {shape}")
            c, h, w = shape
            kh, kw = spec.kernel
            if kh > h or kw > w:
                raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
            shape = (spec.filters, h - kh + 1, w - kw + 1)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"dense needs a flat input, got {shape}")
            shape = (spec.units,)
        elif spec.kind == "zeropad":
            if len(shape) != 3:
                raise ShapeError(f"zeropad needs a [C, H, W] input, got {shape}")
            c, h, w = shape
            shape = (c, h, w + 2 * spec.pad)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        out.append(shape)
    return out


def _init_for(following_specs) -> str:
    """He-uniform when the next activation is a ReLU, Glorot for the output."""
    for spec in following_specs:
        if spec.kind == "relu":
            return "he"
        if spec.kind == "softmax":
            return "glorot"
    return "he"


class Network:
    """An ordered layer stack ending in Softmax, with fused softmax/CE backprop."""

    def __init__(self, specs, input_shape, rng: np.random.Generator, dtype=np.float32):
        specs = tuple(specs)
        if not specs or specs[-1].kind != "softmax":
            raise ParameterError("network must end with a softmax layer")
        trace_shapes(specs, input_shape)  # validates the stack
        self.specs = specs
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.layers: list[Layer] = []
        shape = tuple(input_shape)
        for i, spec in enumerate(specs):
            if spec.kind == "conv2d":
                layer = Conv2D(shape[0], spec, rng, dtype=dtype, init=_init_for(specs[i + 1:]))
            elif spec.kind == "dense":
                layer = Dense(shape[0], spec, rng, dtype=dtype, init=_init_for(specs[i + 1:]))
            elif spec.kind == "relu":
                layer = ReLU(spec)
            elif spec.kind == "softmax":
                layer = Softmax(spec)
            elif spec.kind == "dropout":
                layer = Dropout(spec)
            elif spec.kind == "zeropad":
                layer = ZeroPad(spec)
            else:
                layer = Flatten(spec)
            self.layers.append(layer)
            shape = trace_shapes([spec], shape)[0]
        self.output_shape = shape

    def forward(self, x, train: bool = False, rng=None, sign_trace=None) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input [B, {self.input_shape}], got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng, sign_trace=sign_trace)
        return x

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def loss(self, x, onehot, sign_trace=None) -> float:
        probs = self.forward(x, train=False, sign_trace=sign_trace)
        return batch_cross_entropy(probs, np.asarray(onehot, dtype=self.dtype))

    def loss_and_grads(self, x, onehot, train: bool = False, rng=None):
        """Mean cross-entropy over the batch and its exact parameter gradients.

        Softmax and cross-entropy are fused: backprop starts from (p - y)/B at
        the softmax input, so the softmax layer's own backward is bypassed.
        """
        onehot = np.asarray(onehot, dtype=self.dtype)
        probs = self.forward(x, train=train, rng=rng)
        if probs.shape != onehot.shape:
            raise ShapeError(f"one-hot shape {onehot.shape} != output shape {probs.shape}")
        loss = batch_cross_entropy(probs, onehot)
        grad = (probs - onehot) / self.dtype.type(probs.shape[0])
        for layer in reversed(self.layers[:-1]):
            grad = layer.backward(grad)
        return loss, self.gradients()


# ---------------------------------------------------------------------------
# single-sample functional surface


def conv2d_forward(x, weights, bias) -> np.ndarray:
    """Valid cross-correlation of one [C, H, W] input, plus per-filter bias."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 3 or weights.ndim != 4 or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"incompatible conv shapes {x.shape} and {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
    f, c, kh, kw = weights.shape
    _, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    oh, ow = h - kh + 1, w - kw + 1
    cols = _im2col(x[None], kh, kw)
    out = cols @ weights.reshape(f, -1).T + bias
    return out.reshape(oh, ow, f).transpose(2, 0, 1)


def dense_forward(x, weights, bias) -> np.ndarray:
    """y = W x + b for one flat input."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.size:
        raise ShapeError(f"incompatible dense shapes {x.shape} and {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
    return weights @ x + bias


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x > 0, x, np.zeros((), dtype=x.dtype))


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_onehot(onehot) -> None:
    if not (np.isin(onehot, (0, 1)).all() and (onehot.sum(axis=-1) == 1).all()):
        raise ParameterError("target must be one-hot (exactly one 1 per row)")


def cross_entropy_loss(probs, onehot) -> float:
    """-sum(y * ln(max(p, 1e-12))) for a single probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if probs.shape != onehot.shape or probs.ndim != 1:
        raise ShapeError(f"shapes {probs.shape} and {onehot.shape} must match (1-D)")
    _check_onehot(onehot)
    return float(-(onehot * np.log(np.maximum(probs, LOSS_CLAMP))).sum())


def batch_cross_entropy(probs, onehot) -> float:
    """Mean clamped cross-entropy over a [B, k] batch."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    _check_onehot(onehot)
    per = -(onehot * np.log(np.maximum(probs, LOSS_CLAMP))).sum(axis=-1)
    return float(per.mean())


def dropout(x, rate: float, mode: str, rng=None) -> np.ndarray:
    """Inverted dropout on an arbitrary tensor; mode is 'train' or 'eval'."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if mode == "eval" or rate == 0.0:
        return x.copy()
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    return np.where(keep, x / (1.0 - rate), 0.0)


def backprop(network: Network, x, onehot):
    """Single-sample loss and exact gradients w.r.t. every parameter."""
    x = np.asarray(x)
    onehot = np.asarray(onehot)
    loss, grads = network.loss_and_grads(x[None], onehot[None])
    return loss, [g.copy() for g in grads]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam accumulators; shapes mirror the parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(params, grads, state: OptimizerState):
    """One bias-corrected Adam update, in place; returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads, and optimizer state must align")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: tuple[int, int]  # (parameter tensor index, flat element index)
    n_checked: int
    n_kink_skipped: int
    kink_indices: list
    tolerance: float
    passed: bool
    per_param_max: list = field(default_factory=list)  # max rel error per tensor


def _signs_differ(a, b) -> bool:
    return any(not np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(network: Network, x, onehot, step: float = 1e-5,
               tolerance: float = 1e-4, zero_tol: float = 1e-8) -> GradCheckReport:
    """Compare backprop against central finite differences, one parameter at a time.

    Coordinates whose perturbation flips any ReLU activation pattern sit on a
    kink where the two-sided difference is meaningless; they are excluded from
    the max and reported separately.
    """
    x = np.asarray(x)
    onehot = np.asarray(onehot)
    if x.shape[1:] != network.input_shape:
        x = x[None]
        onehot = onehot[None]
    _, analytic = network.loss_and_grads(x, onehot)
    analytic = [g.copy() for g in analytic]

    max_rel = 0.0
    worst = (-1, -1)
    kinks = []
    n_checked = 0
    per_param_max = [0.0 for _ in network.parameters()]
    for pi, p in enumerate(network.parameters()):
        flat = p.reshape(-1)
        gflat = analytic[pi].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            signs_hi: list = []
            signs_lo: list = []
            flat[k] = orig + step
            hi = network.loss(x, onehot, sign_trace=signs_hi)
            flat[k] = orig - step
            lo = network.loss(x, onehot, sign_trace=signs_lo)
            flat[k] = orig
            if _signs_differ(signs_hi, signs_lo):
                kinks.append((pi, k))
                continue
            fd = (hi - lo) / (2.0 * step)
            bp = float(gflat[k])
            denom = max(abs(fd), abs(bp))
            rel = 0.0 if denom < zero_tol else abs(fd - bp) / denom
            n_checked += 1
            per_param_max[pi] = max(per_param_max[pi], rel)
            if rel > max_rel:
                max_rel = rel
                worst = (pi, k)
    return GradCheckReport(
        max_rel_error=max_rel,
        worst_param=worst,
        n_checked=n_checked,
        n_kink_skipped=len(kinks),
        kink_indices=kinks,
        tolerance=tolerance,
        passed=max_rel < tolerance,
        per_param_max=per_param_max,
    )


def random_micro_network(seed: int, linear_only: bool = False) -> tuple[Network, np.ndarray, np.ndarray]:
    """A small random conv+dense stack (<= ~5k params) with a matching input/target.

    Used by the gradient-check suite; always float64 so finite differences are
    trustworthy.
    """
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 3))
    h = int(rng.integers(2, 4))
    w = int(rng.integers(6, 10))
    f1 = int(rng.integers(2, 5))
    f2 = int(rng.integers(2, 5))
    k1w = int(rng.integers(2, 4))
    units = int(rng.integers(4, 9))
    classes = 2
    specs = [
        conv_spec(f1, 1, k1w),
    ]
    if not linear_only:
        specs.append(relu_spec())
    specs += [conv_spec(f2, h, 2)]
    if not linear_only:
        specs.append(relu_spec())
    specs += [flatten_spec(), dense_spec(units)]
    if not linear_only:
        specs.append(relu_spec())
    specs += [dense_spec(classes), softmax_spec()]
    net = Network(specs, (c, h, w), rng, dtype=np.float64)
    x = rng.standard_normal((c, h, w))
    onehot = np.zeros(classes)
    onehot[int(rng.integers(0, classes))] = 1.0
    return net, x, onehot
