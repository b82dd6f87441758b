"""Dense layer library: convolution, max pooling, ReLU, dropout, softmax
cross-entropy and SGD, each with hand-written gradients.

Tensors are ``(batch, channels, height, width)`` numpy arrays. Every op
computes in the dtype of its inputs, so float64 arrays give a 64-bit path for
gradient checks while training runs in float32.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: tuple = (1, 1)

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be 4-D, got shape {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")
        if min(self.kernel.shape[2:]) < 1 or min(self.stride) < 1:
            raise ShapeError("kernel and stride dims must be >= 1")

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    @property
    def kernel_size(self):
        return self.kernel.shape[2], self.kernel.shape[3]

    def output_hw(self, h, w):
        kh, kw = self.kernel_size
        sh, sw = self.stride
        if h < kh or w < kw:
            raise ShapeError(f"input spatial dims {(h, w)} smaller than kernel {(kh, kw)}")
        return (h - kh) // sh + 1, (w - kw) // sw + 1


@dataclass
class OptimizerState:
    learning_rate: float = 0.0005
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            # lr 0 is allowed to freeze a model; negative rates are not
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def _check_input(x, layer):
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D (batch, channels, h, w), got shape {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(f"input shape {x.shape} does not match kernel shape {layer.kernel.shape}")
    return layer.output_hw(x.shape[2], x.shape[3])


def conv_forward_cn(x, kernel, bias, stride=(1, 1)):
    """Convolution on a channel-major ``(c, n, h, w)`` map.

    Returns the ``(cout, n, oh, ow)`` output and the column matrix for
    :func:`conv_backward_cn`.
    """
    cout, _, kh, kw = kernel.shape
    _, n, h, w = x.shape
    oh, ow = (h - kh) // stride[0] + 1, (w - kw) // stride[1] + 1
    cols = _kernels.im2col(x, kh, kw, *stride)
    out = kernel.reshape(cout, -1) @ cols
    out += bias[:, None]
    return out.reshape(cout, n, oh, ow), cols


def conv_backward_cn(x_shape, kernel, stride, grad_out, cols, need_input_grad=True):
    cout, _, kh, kw = kernel.shape
    g = grad_out.reshape(cout, -1)
    grad_kernel = (g @ cols.T).reshape(kernel.shape)
    grad_bias = g.sum(axis=1)
    grad_input = None
    if need_input_grad:
        gcols = kernel.reshape(cout, -1).T @ g
        grad_input = _kernels.col2im(gcols, tuple(x_shape), kh, kw, *stride)
    return grad_input, grad_kernel, grad_bias


def conv2d_forward(x, layer, return_cols=False):
    """Valid cross-correlation of ``x`` with ``layer.kernel`` plus bias.

    With ``return_cols`` the im2col matrix is returned as well so that
    :func:`conv2d_backward` can reuse it.
    """
    _check_input(x, layer)
    out, cols = conv_forward_cn(x.transpose(1, 0, 2, 3), layer.kernel, layer.bias, layer.stride)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return (out, cols) if return_cols else out


def conv2d_backward(x, layer, grad_out, cols=None, need_input_grad=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    oh, ow = _check_input(x, layer)
    expected = (x.shape[0], layer.out_channels, oh, ow)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    x_cn = x.transpose(1, 0, 2, 3)
    if cols is None:
        cols = _kernels.im2col(x_cn, *layer.kernel_size, *layer.stride)
    g_cn = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3))
    gx, gk, gb = conv_backward_cn(x_cn.shape, layer.kernel, layer.stride, g_cn, cols, need_input_grad)
    if gx is not None:
        gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
    return gx, gk, gb


def maxpool_forward(x, window=(2, 2), stride=(2, 2)):
    """Returns ``(output, argmax)``; ties go to the first cell in row-major order."""
    ph, pw = window
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D, got shape {x.shape}")
    if x.shape[2] < ph or x.shape[3] < pw:
        raise ShapeError(f"pool window {window} larger than input {x.shape[2:]}")
    return _kernels.maxpool_forward(x, ph, pw, stride[0], stride[1])


def maxpool_backward(grad_out, argmax, input_shape, window=(2, 2), stride=(2, 2)):
    return _kernels.maxpool_backward(grad_out, argmax, tuple(input_shape),
                                     window[0], window[1], stride[0], stride[1])


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def dropout(x, rate, mode, rng=None):
    """Inverted dropout. Returns ``(output, mask)``; mask is None in eval mode."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or rate == 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target):
    """Mean cross-entropy of softmax(logits) against integer targets.

    Accepts a single logit vector with a scalar target or an ``(n, k)`` batch
    with ``n`` targets. The gradient is w.r.t. the logits and already carries
    the ``1/n`` of the mean.
    """
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {t.shape[0]} targets")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(logsum - shifted[rows, t]))
    grad = softmax(z)
    grad[rows, t] -= 1
    grad /= z.shape[0]
    return loss, (grad[0] if single else grad)


def sgd_step(params, grads, state):
    """In-place SGD update of each array in ``params``; also returns them.

    ``momentum == 0``: ``p -= lr * g``. Otherwise ``v = mu * v + g`` then
    ``p -= lr * v``, with one velocity buffer per parameter slot.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    lr = state.learning_rate
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param {i}: shape {p.shape} != grad shape {g.shape}")
        if state.momentum > 0:
            v = state.velocity.get(i)
            if v is None:
                v = state.velocity[i] = np.zeros_like(p)
            v *= p.dtype.type(state.momentum)
            v += g
            step = v
        else:
            step = g
        p -= p.dtype.type(lr) * step
    return params


# --------------------------------------------------------------------------
# dilated ("dense") variants used for sliding-window evaluation
# --------------------------------------------------------------------------

def conv2d_dilated(x, kernel, bias, dilation=(1, 1)):
    """Stride-1 valid convolution of a single ``(c, h, w)`` map with kernel
    taps spaced ``dilation`` apart."""
    cout, cin, kh, kw = kernel.shape
    c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"input shape {x.shape} does not match kernel shape {kernel.shape}")
    dh, dw = dilation
    oh, ow = h - (kh - 1) * dh, w - (kw - 1) * dw
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {x.shape} too small for dilated kernel {kernel.shape} at {dilation}")
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 0, 1))  # strided taps defeat BLAS
    out = np.empty((cout, oh * ow), dtype=x.dtype)
    out[:] = bias[:, None]
    shifted = np.empty((cin, oh, ow), dtype=x.dtype)
    prod = np.empty_like(out)
    for u in range(kh):
        for v in range(kw):
            shifted[:] = x[:, u * dh:u * dh + oh, v * dw:v * dw + ow]
            np.matmul(taps[u, v], shifted.reshape(cin, -1), out=prod)
            out += prod
    return out.reshape(cout, oh, ow)


def maxpool_dilated(x, window=(2, 2), dilation=(1, 1)):
    ph, pw = window
    dh, dw = dilation
    c, h, w = x.shape
    oh, ow = h - (ph - 1) * dh, w - (pw - 1) * dw
    out = x[:, :oh, :ow].copy()
    for u in range(ph):
        for v in range(pw):
            np.maximum(out, x[:, u * dh:u * dh + oh, v * dw:v * dw + ow], out=out)
    return out
