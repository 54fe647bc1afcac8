"""Dense float64 tensors with a reverse-mode gradient tape.

Only the primitives the snow-response network and the fusion necks need are
provided. Operations record themselves onto the active ``GradTape`` (if any);
outside a tape they are plain numpy computations.

Shapes follow the N x C x H x W convention for feature maps. There is no
broadcasting: every shape mismatch raises ``ShapeError``.
"""

import contextvars
import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradientCheckError, ResizeError, ShapeError

logger = structlog.get_logger()

ArrayLike = Union[np.ndarray, Sequence[Any], float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_tensor_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "id", "name")

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.id = next(_tensor_ids)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    @classmethod
    def zeros(cls, shape: Sequence[int], name: Optional[str] = None) -> "Tensor":
        return cls(np.zeros(tuple(shape)), name=name)

    @classmethod
    def ones(cls, shape: Sequence[int], name: Optional[str] = None) -> "Tensor":
        return cls(np.ones(tuple(shape)), name=name)

    @classmethod
    def uniform(cls, rng: np.random.Generator, shape: Sequence[int], low: float, high: float,
                name: Optional[str] = None) -> "Tensor":
        return cls(rng.uniform(low, high, size=tuple(shape)), name=name)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(id={self.id}{label} shape={self.shape})"


@dataclass
class TapeRecord:
    op: str
    input_ids: Tuple[int, ...]
    output_id: int
    backward: BackwardFn
    context: Dict[str, Any] = field(default_factory=dict)


_active_tape: "contextvars.ContextVar[Optional[GradTape]]" = contextvars.ContextVar(
    "snowfuse_active_tape", default=None
)
_active_probe: "contextvars.ContextVar[Optional[KinkProbe]]" = contextvars.ContextVar(
    "snowfuse_active_probe", default=None
)


class GradTape:
    """Records operations executed inside ``with GradTape() as tape:``.

    The tape is context-local, so computations running on different threads
    each see only their own tape.
    """

    def __init__(self) -> None:
        self.records: List[TapeRecord] = []
        self.visit_count = 0
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> List[np.ndarray]:
        if target.size != 1:
            raise ShapeError(f"gradient target must be a scalar, got shape {target.shape}")

        grads: Dict[int, np.ndarray] = {target.id: np.ones_like(target.data)}
        self.visit_count = 0

        # Records are in creation order, so every consumer of a tensor sits after
        # its producer: a single reverse sweep sees all contributions first.
        for record in reversed(self.records):
            self.visit_count += 1
            upstream = grads.get(record.output_id)
            if upstream is None:
                continue
            input_grads = record.backward(upstream)
            for input_id, grad in zip(record.input_ids, input_grads):
                if grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + grad
                else:
                    grads[input_id] = grad

        return [grads.get(source.id, np.zeros_like(source.data)) for source in sources]


class KinkProbe:
    """Collects values sitting next to non-differentiable points during a forward pass."""

    def __init__(self) -> None:
        self.entries: List[Tuple[np.ndarray, Tuple[float, ...]]] = []


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn, **context: Any) -> None:
    tape = _active_tape.get()
    if tape is not None:
        tape.records.append(
            TapeRecord(op, tuple(t.id for t in inputs), output.id, backward, context)
        )


def register_kinks(values: np.ndarray, kinks: Tuple[float, ...]) -> None:
    probe = _active_probe.get()
    if probe is not None:
        probe.entries.append((np.array(values, dtype=np.float64, copy=True), kinks))


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.data.ndim != rank:
        raise ShapeError(f"{op}: expected a rank-{rank} tensor, got shape {x.shape}")


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _require_channel_vector(v: Tensor, channels: int, op: str, label: str) -> None:
    if v.shape != (channels,):
        raise ShapeError(f"{op}: {label} must have shape ({channels},), got {v.shape}")


@dataclass
class ConvLayer:
    weights: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weights.data.ndim != 4:
            raise ShapeError(f"conv weights must be Cout x Cin x K x K, got {self.weights.shape}")
        cout, _, kh, kw = self.weights.shape
        if kh != kw:
            raise ShapeError(f"conv kernel must be square, got {kh}x{kw}")
        if kh % 2 == 0:
            raise ShapeError(f"conv kernel size must be odd, got {kh}")
        if self.bias is not None:
            _require_channel_vector(self.bias, cout, "conv", "bias")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be nonnegative, got {self.padding}")

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.weights] if self.bias is None else [self.weights, self.bias]

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        k, p, s = self.kernel_size, self.padding, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    @classmethod
    def create(cls, rng: np.random.Generator, in_channels: int, out_channels: int, kernel_size: int,
               stride: int = 1, padding: Optional[int] = None, bias: bool = True,
               scale: Optional[float] = None) -> "ConvLayer":
        """Uniform init in [-scale, scale]; scale defaults to 1/sqrt(fan_in)."""
        if scale is None:
            scale = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
        weights = Tensor.uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), -scale, scale)
        bias_tensor = Tensor.uniform(rng, (out_channels,), -scale, scale) if bias else None
        return cls(
            weights=weights,
            bias=bias_tensor,
            stride=stride,
            padding=kernel_size // 2 if padding is None else padding,
        )


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N*Ho*Wo) x (C*K*K) patch matrix of a padded N x C x H x W array, rows in N, Ho, Wo order."""
    n, c = xp.shape[:2]
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, layer: ConvLayer) -> Tensor:
    _require_rank(x, 4, "conv2d")
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels but the layer expects {layer.in_channels}")

    k, p, s = layer.kernel_size, layer.padding, layer.stride
    if h + 2 * p < k or w + 2 * p < k:
        raise ShapeError(f"conv2d: padded input {h + 2 * p}x{w + 2 * p} is smaller than the {k}x{k} kernel")

    ho, wo = layer.output_size(h, w)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    kernel = layer.weights.data
    cout = layer.out_channels
    kernel_matrix = kernel.reshape(cout, c * k * k)

    out = (_im2col(xp, k, s, ho, wo) @ kernel_matrix.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if layer.bias is not None:
        out = out + layer.bias.data[None, :, None, None]
    result = Tensor(out)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_rows = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        # columns are rebuilt here rather than held by the tape
        grad_kernel = (grad_rows.T @ _im2col(xp, k, s, ho, wo)).reshape(kernel.shape)
        grad_cols = (grad_rows @ kernel_matrix).reshape(n, ho, wo, c, k, k)
        grad_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                grad_xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += grad_cols[..., i, j].transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, p:p + h, p:p + w] if p else grad_xp
        grads: List[Optional[np.ndarray]] = [grad_x, grad_kernel]
        if layer.bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads

    record("conv2d", [x, *layer.parameters()], result, backward, stride=s, padding=p)
    return result


class ResizeMode(str, Enum):
    UP = "up"
    DOWN = "down"


def resize(x: Tensor, target_h: int, target_w: int, mode: Union[ResizeMode, str]) -> Tensor:
    """Nearest-neighbour upsampling or non-overlapping average pooling by integer factors."""
    _require_rank(x, 4, "resize")
    mode = ResizeMode(mode)
    n, c, h, w = x.shape

    if mode is ResizeMode.UP:
        if target_h < h or target_w < w or target_h % h or target_w % w:
            raise ResizeError(f"resize up: {h}x{w} -> {target_h}x{target_w} is not an integer upscale")
        fh, fw = target_h // h, target_w // w
        out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)

        def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return [grad.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5))]
    else:
        if target_h < 1 or target_w < 1 or target_h > h or target_w > w or h % target_h or w % target_w:
            raise ResizeError(f"resize down: {h}x{w} -> {target_h}x{target_w} is not an integer downscale")
        fh, fw = h // target_h, w // target_w
        out = x.data.reshape(n, c, target_h, fh, target_w, fw).mean(axis=(3, 5))

        def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            spread = np.repeat(np.repeat(grad, fh, axis=2), fw, axis=3)
            return [spread / (fh * fw)]

    result = Tensor(out)
    record("resize", [x], result, backward, mode=mode.value, factor=(fh, fw))
    return result


def resize_to(x: Tensor, target_h: int, target_w: int) -> Tensor:
    _require_rank(x, 4, "resize")
    h, w = x.shape[2], x.shape[3]
    if (target_h, target_w) == (h, w):
        return x
    if target_h >= h and target_w >= w:
        return resize(x, target_h, target_w, ResizeMode.UP)
    if target_h <= h and target_w <= w:
        return resize(x, target_h, target_w, ResizeMode.DOWN)
    raise ResizeError(f"resize: {h}x{w} -> {target_h}x{target_w} mixes up- and down-scaling")


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        return cls(mean=np.zeros(channels), var=np.ones(channels), momentum=momentum)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
              running_stats: Optional[RunningStats] = None, training: bool = True) -> Tensor:
    _require_rank(x, 4, "batchnorm")
    n, c, h, w = x.shape
    _require_channel_vector(gamma, c, "batchnorm", "gamma")
    _require_channel_vector(beta, c, "batchnorm", "beta")
    m = n * h * w
    if m == 0:
        raise ShapeError(f"batchnorm: channels of shape {x.shape} hold no elements")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_stats is not None:
            unbiased = var * m / (m - 1) if m > 1 else var
            running_stats.mean = (1 - running_stats.momentum) * running_stats.mean + running_stats.momentum * mean
            running_stats.var = (1 - running_stats.momentum) * running_stats.var + running_stats.momentum * unbiased
    else:
        if running_stats is None:
            raise ValueError("batchnorm: inference mode needs running statistics")
        mean, var = running_stats.mean, running_stats.var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]
    result = Tensor(out)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_gamma = (grad * x_hat).sum(axis=(0, 2, 3))
        grad_beta = grad.sum(axis=(0, 2, 3))
        grad_x_hat = grad * gamma.data[None, :, None, None]
        if training:
            sum_grad = grad_x_hat.sum(axis=(0, 2, 3))[None, :, None, None]
            sum_grad_xhat = (grad_x_hat * x_hat).sum(axis=(0, 2, 3))[None, :, None, None]
            grad_x = (inv_std[None, :, None, None] / m) * (m * grad_x_hat - sum_grad - x_hat * sum_grad_xhat)
        else:
            grad_x = grad_x_hat * inv_std[None, :, None, None]
        return [grad_x, grad_gamma, grad_beta]

    record("batchnorm", [x, gamma, beta], result, backward, training=training, eps=eps)
    return result


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    _require_rank(x, 4, "prelu")
    c = x.shape[1]
    _require_channel_vector(slope, c, "prelu", "slope")
    register_kinks(x.data, (0.0,))

    a = slope.data[None, :, None, None]
    positive = x.data >= 0
    result = Tensor(np.where(positive, x.data, a * x.data))

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_x = np.where(positive, grad, a * grad)
        grad_slope = np.where(positive, 0.0, grad * x.data).sum(axis=(0, 2, 3))
        return [grad_x, grad_slope]

    record("prelu", [x, slope], result, backward)
    return result


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "elementwise_add")
    result = Tensor(a.data + b.data)
    record("add", [a, b], result, lambda grad: [grad, grad])
    return result


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: nothing to concatenate")
    for part in parts:
        _require_rank(part, 4, "concat_channels")
    n, _, h, w = parts[0].shape
    for part in parts[1:]:
        pn, _, ph, pw = part.shape
        if (pn, ph, pw) != (n, h, w):
            raise ShapeError(f"concat_channels: part {part.shape} does not match N,H,W of {parts[0].shape}")

    sizes = [part.shape[1] for part in parts]
    bounds = np.cumsum([0] + sizes)
    result = Tensor(np.concatenate([part.data for part in parts], axis=1))

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return [grad[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    record("concat_channels", parts, result, backward, sizes=sizes)
    return result


def split_channels(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    _require_rank(x, 4, "split_channels")
    if any(size < 1 for size in sizes) or sum(sizes) != x.shape[1]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not partition {x.shape[1]} channels")

    bounds = np.cumsum([0] + list(sizes))
    outputs = []
    for i in range(len(sizes)):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        part = Tensor(x.data[:, lo:hi])

        def backward(grad: np.ndarray, lo: int = lo, hi: int = hi) -> Sequence[Optional[np.ndarray]]:
            full = np.zeros_like(x.data)
            full[:, lo:hi] = grad
            return [full]

        record("split_channels", [x], part, backward, channels=(lo, hi))
        outputs.append(part)
    return outputs


def max_over_channels(x: Tensor) -> Tensor:
    """Per-pixel maximum over the channel axis; ties resolve to the lowest channel."""
    _require_rank(x, 4, "max_over_channels")
    if x.shape[1] < 1:
        raise ShapeError("max_over_channels: input has no channels")

    winners = np.argmax(x.data, axis=1)[:, None]
    out = np.take_along_axis(x.data, winners, axis=1)
    if x.shape[1] > 1 and _active_probe.get() is not None:
        top_two = np.sort(x.data, axis=1)[:, -2:]
        register_kinks(top_two[:, 1] - top_two[:, 0], (0.0,))
    result = Tensor(out)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        routed = np.zeros_like(x.data)
        np.put_along_axis(routed, winners, grad, axis=1)
        return [routed]

    record("max_over_channels", [x], result, backward)
    return result


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    result = Tensor(scale * x.data + shift)
    record("affine", [x], result, lambda grad: [scale * grad])
    return result


def mean(x: Tensor) -> Tensor:
    size = x.size
    if size == 0:
        raise ShapeError("mean: empty tensor")
    result = Tensor(x.data.mean())
    record("mean", [x], result, lambda grad: [np.full_like(x.data, grad.item() / size)])
    return result


def sum_all(x: Tensor) -> Tensor:
    result = Tensor(x.data.sum())
    record("sum_all", [x], result, lambda grad: [np.full_like(x.data, grad.item())])
    return result


def l1_norm(params: Sequence[Tensor]) -> Tensor:
    result = Tensor(sum(float(np.abs(p.data).sum()) for p in params))

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return [grad.item() * np.sign(p.data) for p in params]

    record("l1_norm", params, result, backward)
    return result


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    _require_same_shape(prediction, target, "mse")
    diff = prediction.data - target.data
    size = diff.size
    result = Tensor(np.mean(diff * diff))

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        g = 2.0 * grad.item() * diff / size
        return [g, -g]

    record("mse", [prediction, target], result, backward)
    return result


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    for term in terms:
        if term.size != 1:
            raise ShapeError(f"add_scalars: expected scalar terms, got shape {term.shape}")
    result = Tensor(sum(term.item() for term in terms))
    record("add_scalars", terms, result, lambda grad: [np.full_like(t.data, grad.item()) for t in terms])
    return result


GradLike = Union[np.ndarray, Tensor]


def _as_array(grad: GradLike) -> np.ndarray:
    return grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)


def sgd_step(params: Sequence[Tensor], grads: Sequence[GradLike], lr: float, weight_decay: float = 0.0) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"sgd_step: {len(params)} parameters but {len(grads)} gradients")
    for param, grad in zip(params, grads):
        g = _as_array(grad)
        if g.shape != param.data.shape:
            raise ShapeError(f"sgd_step: gradient {g.shape} does not match parameter {param.shape}")
        param.data -= lr * (g + weight_decay * param.data)


class SGD:
    DETECTOR_PRESET = {"lr": 0.01, "momentum": 0.937, "weight_decay": 0.0005}

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[GradLike]) -> None:
        if self.momentum == 0.0:
            sgd_step(self.params, grads, self.lr, self.weight_decay)
            return
        if len(grads) != len(self.params):
            raise ShapeError(f"SGD.step: {len(self.params)} parameters but {len(grads)} gradients")
        for param, velocity, grad in zip(self.params, self._velocity, grads):
            g = _as_array(grad)
            if g.shape != param.data.shape:
                raise ShapeError(f"SGD.step: gradient {g.shape} does not match parameter {param.shape}")
            velocity *= self.momentum
            velocity += g + self.weight_decay * param.data
            param.data -= self.lr * velocity


def _probe_eval(f: Callable[[], Tensor]) -> Tuple[float, List[Tuple[np.ndarray, Tuple[float, ...]]]]:
    probe = KinkProbe()
    probe_token = _active_probe.set(probe)
    tape_token = _active_tape.set(None)
    try:
        value = f()
    finally:
        _active_tape.reset(tape_token)
        _active_probe.reset(probe_token)
    if value.size != 1:
        raise GradientCheckError(f"finite_diff_check: f must return a scalar, got shape {value.shape}")
    scalar = value.item()
    if not np.isfinite(scalar):
        raise GradientCheckError(f"finite_diff_check: f returned a non-finite value {scalar}")
    return scalar, probe.entries


def _near_kink(plus: List[Tuple[np.ndarray, Tuple[float, ...]]],
               minus: List[Tuple[np.ndarray, Tuple[float, ...]]], margin: float) -> bool:
    if len(plus) != len(minus):
        raise GradientCheckError("finite_diff_check: f is not structurally deterministic")
    for (a, kinks), (b, _) in zip(plus, minus):
        delta = np.abs(a - b)
        moving = delta > 0
        if not moving.any():
            continue
        midpoint = 0.5 * (a[moving] + b[moving])
        # delta / 2eps is the sensitivity to the coordinate; margin * eps along the
        # coordinate is margin / 2 * delta in value space, plus the probe half-width.
        reach = (0.5 * margin + 0.5) * delta[moving]
        for kink in kinks:
            if np.any(np.abs(midpoint - kink) <= reach):
                return True
    return False


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
                      sample: Optional[int] = None, seed: int = 0, kink_margin: float = 10.0) -> float:
    """Largest relative error between tape gradients and central differences.

    ``sample`` limits the number of coordinates checked per parameter (chosen with
    ``seed``). Coordinates whose perturbation brings a registered kink-sensitive
    value within ``kink_margin * epsilon`` of a kink are skipped.
    """
    with GradTape() as tape:
        output = f()
    if output.size != 1:
        raise GradientCheckError(f"finite_diff_check: f must return a scalar, got shape {output.shape}")
    if not np.isfinite(output.item()):
        raise GradientCheckError(f"finite_diff_check: f returned a non-finite value {output.item()}")
    analytic = tape.gradient(output, params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for param, grad in zip(params, analytic):
        if not np.all(np.isfinite(param.data)):
            raise GradientCheckError(f"finite_diff_check: parameter {param} holds non-finite values")
        total = param.size
        if sample is None or sample >= total:
            coordinates = np.arange(total)
        else:
            coordinates = np.sort(rng.choice(total, size=sample, replace=False))

        for flat_index in coordinates:
            index = np.unravel_index(int(flat_index), param.shape)
            original = param.data[index]
            param.data[index] = original + epsilon
            plus, plus_kinks = _probe_eval(f)
            param.data[index] = original - epsilon
            minus, minus_kinks = _probe_eval(f)
            param.data[index] = original

            if _near_kink(plus_kinks, minus_kinks, kink_margin):
                skipped += 1
                continue

            numeric = (plus - minus) / (2.0 * epsilon)
            exact = float(grad[index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, error)
            checked += 1

    logger.debug("Finite difference check finished", checked=checked, skipped=skipped, max_relative_error=worst)
    return worst
