"""Dense float64 layer math for the sequencer: forward and backward passes
for 3x3 valid convolution, 2x2 max pooling, ReLU, fully-connected layers and
softmax cross-entropy, plus SGD with momentum and weight decay.

Tensors are plain ``numpy.ndarray`` objects laid out as (batch, channel,
row, col). Every function is pure: inputs are never modified.
"""

from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, LabelError

KERNEL = 3
_AXES = ("batch", "channel", "height", "width")


class LayerGrads(NamedTuple):
    grad_input: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray


def _check_rank(x, rank, what):
    if x.ndim != rank:
        raise DimensionError(f"{what}: expected rank {rank}, got shape {x.shape}")


def _check_conv_shapes(x, weights, bias=None):
    _check_rank(x, 4, "conv input")
    _check_rank(weights, 4, "conv weights")
    c_out, c_in, kh, kw = weights.shape
    if (kh, kw) != (KERNEL, KERNEL):
        raise DimensionError(f"conv weights: kernel must be 3x3, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise DimensionError(
            f"conv channel axis: input has {x.shape[1]} channels, weights expect {c_in}")
    for axis in (2, 3):
        if x.shape[axis] < KERNEL:
            raise DimensionError(
                f"conv {_AXES[axis]} axis: size {x.shape[axis]} is smaller than the kernel")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(
            f"conv bias: expected shape ({c_out},) for the output-channel axis, got {bias.shape}")


def to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def weight_matrix(weights):
    """(c_out, c_in, 3, 3) kernels as a (c_out, 9*c_in) matrix in (ky, kx, c) order."""
    return np.ascontiguousarray(weights.transpose(0, 2, 3, 1)).reshape(weights.shape[0], -1)


def im2col_nhwc(x):
    """Unfold 3x3 windows of an NHWC tensor into rows of length 9*c.

    Rows are ordered (n, y, x); columns (ky, kx, c).
    """
    n, h, w, c = x.shape
    windows = sliding_window_view(x, (KERNEL, KERNEL), axis=(1, 2))  # (n, oh, ow, c, 3, 3)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * (h - 2) * (w - 2), KERNEL * KERNEL * c)


def conv_forward_nhwc(cols, in_shape, wmat, bias):
    n, h, w, _ = in_shape
    out = cols @ wmat.T
    out += bias
    return out.reshape(n, h - 2, w - 2, wmat.shape[0])


def conv_backward_nhwc(cols, in_shape, wmat, grad_output, need_input_grad=True):
    """Gradients of the NHWC convolution; weight gradient in matrix layout."""
    n, h, w, c_in = in_shape
    oh, ow = h - 2, w - 2
    go = grad_output.reshape(-1, wmat.shape[0])
    grad_wmat = go.T @ cols
    grad_b = go.sum(axis=0)
    if not need_input_grad:
        return None, grad_wmat, grad_b
    gcols = (go @ wmat).reshape(n, oh, ow, KERNEL, KERNEL, c_in)
    grad_x = np.zeros(in_shape)
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            grad_x[:, dy:dy + oh, dx:dx + ow, :] += gcols[:, :, :, dy, dx, :]
    return grad_x, grad_wmat, grad_b


def wmat_to_weights(wmat, weights_shape):
    c_out, c_in, kh, kw = weights_shape
    return np.ascontiguousarray(wmat.reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2))


def conv2d_forward(x, weights, bias):
    """Valid, stride-1 cross-correlation with a bank of 3x3 kernels."""
    _check_conv_shapes(x, weights, bias)
    xh = to_nhwc(x)
    return to_nchw(conv_forward_nhwc(im2col_nhwc(xh), xh.shape, weight_matrix(weights), bias))


def conv2d_backward(x, weights, grad_output):
    _check_conv_shapes(x, weights)
    n, _, h, w = x.shape
    expected = (n, weights.shape[0], h - 2, w - 2)
    if grad_output.shape != expected:
        raise DimensionError(f"conv grad_output: expected shape {expected}, got {grad_output.shape}")
    xh = to_nhwc(x)
    gx, gw, gb = conv_backward_nhwc(im2col_nhwc(xh), xh.shape, weight_matrix(weights),
                                    to_nhwc(grad_output))
    return LayerGrads(to_nchw(gx), wmat_to_weights(gw, weights.shape), gb)


def _pool_quads(x, h_axis):
    """The four strided views of 2x2 windows, in row-major window order."""
    sl = [slice(None)] * x.ndim

    def view(dy, dx):
        s = list(sl)
        s[h_axis] = slice(dy, None, 2)
        s[h_axis + 1] = slice(dx, None, 2)
        return x[tuple(s)]

    return view(0, 0), view(0, 1), view(1, 0), view(1, 1)


def _pool_forward(x, h_axis):
    a, b, c, d = _pool_quads(x, h_axis)
    ab, cd = np.maximum(a, b), np.maximum(c, d)
    out = np.maximum(ab, cd)
    # strict comparisons keep the earliest position on ties
    idx = np.where(cd > ab, 2 + (d > c), (b > a).astype(np.int64))
    return out, idx


def _pool_backward(argmax, grad_output, h_axis):
    shape = list(grad_output.shape)
    shape[h_axis] *= 2
    shape[h_axis + 1] *= 2
    grad_x = np.zeros(shape)
    for pos, view in enumerate(_pool_quads(grad_x, h_axis)):
        view[...] = grad_output * (argmax == pos)
    return grad_x


def maxpool_forward_nhwc(x):
    return _pool_forward(x, 1)


def maxpool_backward_nhwc(argmax, grad_output):
    return _pool_backward(argmax, grad_output, 1)


def maxpool2x2_forward(x):
    """Non-overlapping 2x2 max pooling.

    Returns the pooled tensor and an index map holding, for each window, the
    position of its maximum as ``2*row + col``. Ties go to the first position
    in row-major order.
    """
    _check_rank(x, 4, "pool input")
    for axis in (2, 3):
        if x.shape[axis] % 2:
            raise DimensionError(f"pool {_AXES[axis]} axis: size {x.shape[axis]} is odd")
    return _pool_forward(x, 2)


def maxpool2x2_backward(argmax, grad_output):
    if argmax.shape != grad_output.shape:
        raise DimensionError(
            f"pool backward: index map shape {argmax.shape} != grad_output shape {grad_output.shape}")
    return _pool_backward(argmax, grad_output, 2)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_output):
    # subgradient at exactly 0 is 0
    return grad_output * (x > 0)


def fc_forward(x, weights, bias):
    """Affine map ``x @ weights.T + bias``; ``x`` is flattened to (n, d_in)."""
    x2 = x.reshape(x.shape[0], -1)
    if weights.ndim != 2 or x2.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"fc feature axis: input width {x2.shape[1]} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"fc bias: expected shape ({weights.shape[0]},), got {bias.shape}")
    return x2 @ weights.T + bias


def fc_backward(x, weights, grad_output):
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"fc feature axis: input width {x2.shape[1]} does not match weights {weights.shape}")
    if grad_output.shape != (x2.shape[0], weights.shape[0]):
        raise DimensionError(
            f"fc grad_output: expected {(x2.shape[0], weights.shape[0])}, got {grad_output.shape}")
    grad_x = (grad_output @ weights).reshape(x.shape)
    return LayerGrads(grad_x, grad_output.T @ x2, grad_output.sum(axis=0))


def softmax_cross_entropy(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient wrt logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels: expected shape ({n},), got {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {labels[i]} at index {i} is outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].sum() / n
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


@dataclass
class OptimizerState:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")


def sgd_step(params, grads, state):
    """One SGD update with momentum and L2 weight decay on every parameter.

    ``g = grad + wd*p; v = mu*v - lr*g; p = p + v``. Velocities missing from
    ``state`` start at zero. Returns new ``(params, state)``; the inputs are
    left untouched.
    """
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        g = g + state.weight_decay * p
        v = state.momentum * v - state.learning_rate * g
        new_velocity[name] = v
        new_params[name] = p + v
    new_state = OptimizerState(state.learning_rate, state.momentum, state.weight_decay, new_velocity)
    return new_params, new_state
