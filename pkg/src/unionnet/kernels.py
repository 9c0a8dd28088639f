"""Dense NCHW tensor kernels, each with an explicit forward/backward pair.

Every kernel is a pure function of its arguments; the one sanctioned side
effect is the running-statistics update in batch-norm training mode.
Arrays are processed in the dtype they arrive in: float32 is the
production dtype, float64 is accepted so numerical checks can run the
same code paths at higher precision.

All convolutions are 3x3, stride 1, zero-padded by 1 ("same"), so only
max pooling ever changes spatial resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

KERNEL = 3
PAD = 1


def _check_nchw(x: np.ndarray, name: str = "input") -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 NCHW, got shape {x.shape}")
    return x.shape


@dataclass
class ConvParams:
    """Weights of one 3x3 "same" convolution.

    bias is None for convolutions that feed a batch-norm layer; the norm's
    shift makes a bias redundant there.
    """

    weights: np.ndarray  # (out_channels, in_channels, 3, 3)
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2:] != (KERNEL, KERNEL):
            raise ShapeError(
                f"conv weights must be shaped (out, in, 3, 3), got {self.weights.shape}"
            )
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(
                f"conv bias must be shaped ({self.out_channels},), got {self.bias.shape}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


@dataclass
class BatchNormParams:
    """Per-channel affine batch normalization state."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9  # fraction of the old running statistic kept per update
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == c and self.running_mean.shape == c and self.running_var.shape == c):
            raise ShapeError("batch-norm arrays must all share one (C,) shape")
        if not 0.0 < self.momentum < 1.0:
            raise ValidationError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise ValidationError("running variance must be elementwise >= 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# Per-chunk im2col buffer budget.  Convolutions process the batch in chunks
# of whole images sized to this many bytes so the patch matrix stays
# cache-resident through its GEMM; materializing it for the full batch
# measured ~2x slower on the shapes this model runs.
_COLS_BUDGET = 2 << 20


def _chunk_rows(n: int, bytes_per_image: int) -> int:
    return max(1, min(n, _COLS_BUDGET // max(1, bytes_per_image)))


def _gather3(padded: np.ndarray, buf: np.ndarray, h: int, w: int) -> np.ndarray:
    """Unfold 3x3 "same" patches of a padded chunk into buf (M, C, 9, H, W).

    Row ordering after the reshape is c*9 + (dy*3 + dx), matching
    weights.reshape(K, C*9); every copy is a plain strided slice (no axis
    permutation).  Returns buf viewed as (M, C*9, H*W).
    """
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            buf[:, :, dy * KERNEL + dx] = padded[:, :, dy:dy + h, dx:dx + w]
    m, c = buf.shape[:2]
    return buf.reshape(m, c * 9, h * w)


def _scatter3(dcols: np.ndarray, pbuf: np.ndarray, h: int, w: int) -> None:
    """Fold a (M, C*9, H*W) patch-gradient stack onto a zeroed padded buffer."""
    m, c = pbuf.shape[:2]
    d = dcols.reshape(m, c, 9, h, w)
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            pbuf[:, :, dy:dy + h, dx:dx + w] += d[:, :, dy * KERNEL + dx]


def _pad_hw(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """3x3 cross-correlation with zero padding; output spatial dims equal input's."""
    n, c, h, w = _check_nchw(x)
    if c != p.in_channels:
        raise ShapeError(
            f"input has {c} channels (shape {x.shape}) but weights expect "
            f"{p.in_channels} (shape {p.weights.shape})"
        )
    dtype = np.result_type(x.dtype, p.weights.dtype)
    wmat = p.weights.reshape(p.out_channels, c * 9)
    out = np.empty((n, p.out_channels, h, w), dtype=dtype)
    padded = _pad_hw(x)
    chunk = _chunk_rows(n, c * 9 * h * w * x.dtype.itemsize)
    buf = np.empty((chunk, c, 9, h, w), dtype=x.dtype)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        m = e - s
        cols = _gather3(padded[s:e], buf[:m], h, w)
        np.matmul(wmat, cols, out=out[s:e].reshape(m, p.out_channels, h * w))
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return out


def conv2d_backward(
    x: np.ndarray,
    p: ConvParams,
    grad_out: np.ndarray,
    need_grad_x: bool = True,
) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
    """Gradients of a scalar loss through conv2d_forward.

    Returns (grad_x, {"weights": ..., "bias": ...}); the bias entry is
    present only when the layer carries one.  need_grad_x=False skips
    grad_x (returned as None) when the layer sits at the network input.
    """
    n, c, h, w = _check_nchw(x)
    expected = (n, p.out_channels, h, w)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output shape {expected}")
    hw = h * w
    g = np.ascontiguousarray(grad_out).reshape(n, p.out_channels, hw)
    dtype = np.result_type(x.dtype, grad_out.dtype, p.weights.dtype)
    wmat = p.weights.reshape(p.out_channels, c * 9)
    padded = _pad_hw(x)
    chunk = _chunk_rows(n, c * 9 * hw * x.dtype.itemsize)
    buf = np.empty((chunk, c, 9, h, w), dtype=x.dtype)
    dw = np.zeros((p.out_channels, c * 9), dtype=dtype)
    grad_x = None
    if need_grad_x:
        grad_x = np.empty((n, c, h, w), dtype=dtype)
        # matmul's out= demands its exact result dtype, which ignores x
        dbuf = np.empty((chunk, c * 9, hw), dtype=np.result_type(p.weights.dtype, g.dtype))
        pbuf = np.empty((chunk, c, h + 2 * PAD, w + 2 * PAD), dtype=dtype)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        m = e - s
        cols = _gather3(padded[s:e], buf[:m], h, w)
        dw += np.matmul(g[s:e], cols.transpose(0, 2, 1)).sum(axis=0)
        if need_grad_x:
            np.matmul(wmat.T, g[s:e], out=dbuf[:m])
            pbuf[:m] = 0.0
            _scatter3(dbuf[:m], pbuf[:m], h, w)
            grad_x[s:e] = pbuf[:m, :, PAD:PAD + h, PAD:PAD + w]
    grads = {"weights": dw.reshape(p.weights.shape)}
    if p.bias is not None:
        grads["bias"] = g.sum(axis=(0, 2))
    return grad_x, grads


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input shape {x.shape}")
    return grad_out * (x > 0)


def _batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # biased variance: consistent between normalization and running updates
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def batchnorm_forward(
    x: np.ndarray, p: BatchNormParams, training: bool, stats=None
) -> np.ndarray:
    """Normalize per channel over (N, H, W), then scale and shift.

    Training mode uses batch statistics and folds them into the running
    averages; inference mode reads the running averages.  `stats` may pass
    precomputed (mean, var) of x to avoid recomputing them (training only).
    """
    n, c, h, w = _check_nchw(x)
    if c != p.channels:
        raise ShapeError(f"input has {c} channels but batch-norm expects {p.channels}")
    if training:
        mean, var = _batch_stats(x) if stats is None else stats
        p.running_mean[:] = p.momentum * p.running_mean + (1.0 - p.momentum) * mean
        p.running_var[:] = p.momentum * p.running_var + (1.0 - p.momentum) * var
    else:
        mean = p.running_mean.astype(x.dtype, copy=False)
        var = p.running_var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    scale = (p.gamma * inv_std).astype(x.dtype, copy=False)
    shift = (p.beta - p.gamma * mean * inv_std).astype(x.dtype, copy=False)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm_backward(
    x: np.ndarray, p: BatchNormParams, grad_out: np.ndarray, training: bool = True, stats=None
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Chain rule through batchnorm_forward; batch statistics are recomputed from x
    unless `stats` passes the (mean, var) retained from the forward pass."""
    n, c, h, w = _check_nchw(x)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input shape {x.shape}")
    if c != p.channels:
        raise ShapeError(f"input has {c} channels but batch-norm expects {p.channels}")
    if training:
        mean, var = _batch_stats(x) if stats is None else stats
    else:
        mean = p.running_mean.astype(x.dtype, copy=False)
        var = p.running_var.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + p.epsilon)).astype(x.dtype, copy=False)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]

    grad_gamma = np.einsum("nchw,nchw->c", grad_out, xhat)
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grads = {"gamma": grad_gamma, "beta": grad_beta}
    gamma = p.gamma.astype(x.dtype, copy=False)
    if not training:
        return grad_out * (gamma * inv_std)[None, :, None, None], grads

    # dxhat = grad_out * gamma, so its per-channel sums reuse the two
    # reductions above: sum(dxhat) = gamma*grad_beta, sum(dxhat*xhat) = gamma*grad_gamma
    m = n * h * w
    scale = gamma * inv_std
    grad_x = grad_out * scale[None, :, None, None]
    grad_x -= (scale * grad_beta / m)[None, :, None, None]
    grad_x -= xhat * (scale * grad_gamma / m)[None, :, None, None]
    return grad_x, grads


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling; also returns the in-window argmax for backward.

    Rejects odd spatial dims instead of padding: every supported input is
    even-sized, and silent padding would mask data bugs.
    """
    n, c, h, w = _check_nchw(x)
    if h % 2 or w % 2:
        raise ValidationError(f"max pool requires even spatial dims, got {h}x{w}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = np.ascontiguousarray(windows).reshape(n, c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(windows, argmax[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, argmax


def maxpool2x2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """Route each pooled gradient to its window's argmax position."""
    n, c, hp, wp = _check_nchw(grad_out, "grad_out")
    if argmax.shape != grad_out.shape:
        raise ShapeError(f"argmax shape {argmax.shape} does not match grad_out shape {grad_out.shape}")
    windows = np.zeros((n, c, hp, wp, 4), dtype=grad_out.dtype)
    np.put_along_axis(windows, argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    grad_x = windows.reshape(n, c, hp, wp, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(grad_x).reshape(n, c, hp * 2, wp * 2)


def global_average_pool_forward(x: np.ndarray) -> np.ndarray:
    _check_nchw(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_average_pool_backward(grad_out: np.ndarray, height: int, width: int) -> np.ndarray:
    n, c, one_h, one_w = _check_nchw(grad_out, "grad_out")
    if (one_h, one_w) != (1, 1):
        raise ShapeError(f"grad_out must be (N, C, 1, 1), got {grad_out.shape}")
    return np.broadcast_to(grad_out / (height * width), (n, c, height, width)).copy()


def add_fuse(inputs: list[np.ndarray]) -> np.ndarray:
    """Elementwise sum of same-shaped feature maps; shape and channels are preserved."""
    if not inputs:
        raise ValidationError("add_fuse needs at least one input")
    shape = inputs[0].shape
    for i, t in enumerate(inputs[1:], start=1):
        if t.shape != shape:
            raise ShapeError(f"add_fuse input {i} has shape {t.shape}, expected {shape}")
    out = inputs[0].copy()
    for t in inputs[1:]:
        out += t
    return out


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over the batch with max-subtracted softmax.

    Returns (loss, probs, grad_logits) where grad_logits already carries
    the 1/N batch averaging.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must be shaped ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"labels must lie in [0, {k}), got range "
                              f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    probs = exp / denom
    log_probs = shifted - np.log(denom)
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad_logits = probs.copy()
    grad_logits[np.arange(n), labels] -= 1.0
    grad_logits /= n
    return loss, probs, grad_logits


def linear_softmax_ce(
    features: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Linear map from pooled features to class logits, fused with softmax CE.

    features is (N, C, 1, 1) as produced by global average pooling; weight
    is (C, K). Returns (loss, probs, grads) with gradients for "weight",
    "bias" and "features".
    """
    n, c, one_h, one_w = _check_nchw(features, "features")
    if (one_h, one_w) != (1, 1):
        raise ShapeError(f"features must be (N, C, 1, 1), got {features.shape}")
    if weight.ndim != 2 or weight.shape[0] != c:
        raise ShapeError(f"weight must be ({c}, K), got {weight.shape}")
    k = weight.shape[1]
    if bias.shape != (k,):
        raise ShapeError(f"bias must be shaped ({k},), got {bias.shape}")
    flat = features.reshape(n, c)
    logits = flat @ weight + bias
    loss, probs, grad_logits = softmax_cross_entropy(logits, labels)
    grads = {
        "weight": flat.T @ grad_logits,
        "bias": grad_logits.sum(axis=0),
        "features": (grad_logits @ weight.T).reshape(n, c, 1, 1),
    }
    return loss, probs, grads
