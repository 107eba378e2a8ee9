"""
Dense float64 tensor arithmetic for the toy backbone and context blocks.

Tensors are numpy arrays in row-major, channel-last order (T, H, W, C).
Every operation returns a new array and leaves its inputs untouched.
"""
import logging
from typing import Sequence, Tuple, Union
import numpy as np

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Triple = Tuple[int, int, int]


def as_tensor(values, name: str = "tensor") -> Tensor:
    """Convert to a float64 array and check that every extent is >= 1."""
    array = np.asarray(values, dtype=np.float64)
    if any(extent < 1 for extent in array.shape):
        raise ValueError(f"{name} has a zero extent: shape {array.shape}")
    return array


def _check_rank(x: Tensor, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ValueError(f"{name} must be rank {rank}, got shape {x.shape}")


def _triple(value: Union[int, Sequence[int]], name: str) -> Triple:
    if isinstance(value, (int, np.integer)):
        value = (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3 or any(v < 1 for v in value):
        raise ValueError(f"{name} must be three integers >= 1, got {value}")
    return value


def conv_output_extent(size: int, kernel: int, stride: int, dilation: int, padding: str) -> Tuple[int, int, int]:
    """Returns (output extent, pad before, pad after) for one axis."""
    effective = (kernel - 1) * dilation + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + effective - size, 0)
        # the odd remainder goes to the trailing side
        return out, total // 2, total - total // 2
    if padding == "valid":
        if effective > size:
            raise ValueError(f"dilated kernel extent {effective} exceeds input extent {size}")
        return (size - effective) // stride + 1, 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv3d(x: Tensor, kernel: Tensor, stride=(1, 1, 1), dilation=(1, 1, 1), padding: str = "same") -> Tensor:
    """
    3D convolution (cross-correlation) of a (T, H, W, Cin) input with a
    (kt, kh, kw, Cin, Cout) kernel.

    Accumulates one kernel offset at a time: each offset contributes a strided
    view of the padded input contracted over Cin.
    """
    x = as_tensor(x, "conv3d input")
    kernel = as_tensor(kernel, "conv3d kernel")
    _check_rank(x, 4, "conv3d input")
    _check_rank(kernel, 5, "conv3d kernel")
    if x.shape[3] != kernel.shape[3]:
        raise ValueError(
            f"conv3d channel mismatch: input shape {x.shape} has Cin={x.shape[3]}, "
            f"kernel shape {kernel.shape} expects Cin={kernel.shape[3]}"
        )
    stride = _triple(stride, "stride")
    dilation = _triple(dilation, "dilation")

    outs, pads = [], []
    for axis in range(3):
        out, before, after = conv_output_extent(x.shape[axis], kernel.shape[axis], stride[axis], dilation[axis], padding)
        effective = (kernel.shape[axis] - 1) * dilation[axis] + 1
        if effective > x.shape[axis] + before + after:
            raise ValueError(
                f"conv3d kernel shape {kernel.shape} (dilation {dilation}) exceeds padded input shape {x.shape}"
            )
        outs.append(out)
        pads.append((before, after))
    padded = np.pad(x, pads + [(0, 0)])

    ot, oh, ow = outs
    st, sh, sw = stride
    dt, dh, dw = dilation
    result = np.zeros((ot, oh, ow, kernel.shape[4]), dtype=np.float64)
    for a in range(kernel.shape[0]):
        t0 = a * dt
        for b in range(kernel.shape[1]):
            h0 = b * dh
            for c in range(kernel.shape[2]):
                w0 = c * dw
                window = padded[
                    t0:t0 + (ot - 1) * st + 1:st,
                    h0:h0 + (oh - 1) * sh + 1:sh,
                    w0:w0 + (ow - 1) * sw + 1:sw,
                ]
                result += np.tensordot(window, kernel[a, b, c], axes=([3], [0]))
    return result


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x, "global_avg_pool input")
    _check_rank(x, 4, "global_avg_pool input")
    return x.reshape(-1, x.shape[3]).mean(axis=0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard product; each entry accumulates over K in row-major order."""
    a = as_tensor(a, "matmul lhs")
    b = as_tensor(b, "matmul rhs")
    _check_rank(a, 2, "matmul lhs")
    _check_rank(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = np.asarray(logits, dtype=np.float64)
    if np.isnan(logits).any():
        raise ValueError("softmax received NaN logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def relu(x: Tensor) -> Tensor:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def frozen_batchnorm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Batch norm with frozen statistics folded into a per-channel affine map."""
    x = np.asarray(x, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if scale.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise ValueError(
            f"frozen_batchnorm expects scale/shift of shape ({x.shape[-1]},), got {scale.shape} and {shift.shape}"
        )
    return x * scale + shift


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no learned gain/bias)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def linear(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """x @ weight (+ bias) over the last axis; weight is (in, out)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear expects input dim {weight.shape[0]}, got shape {x.shape}")
    out = x @ weight
    return out if bias is None else out + bias
