"""Minimal layer library with hand-written forward/backward passes.

Everything operates on plain numpy arrays. Spatial layers default to NCHW;
``Conv2d`` and ``BatchNorm2d`` also accept ``layout="CNHW"`` (channels
outermost), which turns im2col into contiguous plane copies and makes the
convolution GEMMs run at memory speed -- the training path uses that layout
internally. Each layer caches whatever its backward pass needs; ``backward``
consumes the upstream gradient, accumulates parameter gradients in place, and
returns the input gradient. Training uses float32; gradient checking
instantiates the same layers in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    BadProbability,
    BadTarget,
    DegenerateBatch,
    NonFiniteLoss,
    OddSpatialDims,
    ShapeMismatch,
    TooSmall,
)


class Parameter:
    """A trainable tensor with an attached gradient buffer."""

    def __init__(self, data: np.ndarray, name: str = ""):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class Layer:
    def params(self) -> list[Parameter]:
        return []

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def _scratch(self, key: str, shape: tuple, dtype) -> np.ndarray:
        """Persistent per-layer work buffer; reallocated only on shape change.

        Reusing these across steps keeps the large intermediate arrays on
        already-faulted pages instead of paying allocation cost every batch.
        Buffers are overwritten by the next forward/backward, so callers must
        not hold their contents across steps (the training loop does not).
        """
        bufs = getattr(self, "_bufs", None)
        if bufs is None:
            bufs = self._bufs = {}
        buf = bufs.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.zeros(shape, dtype=dtype)
            bufs[key] = buf
        return buf


class Conv2d(Layer):
    """3x3 convolution (cross-correlation), stride 1, zero-padding 1.

    Output spatial size equals the input's. ``skip_input_grad`` elides the
    input-gradient computation for layers that sit directly on the data.
    Internally the work runs in CNHW order: im2col then reduces to C*9
    contiguous plane copies and one ``(F, C*9) @ (C*9, N*H*W)`` GEMM.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "conv", skip_input_grad: bool = False,
                 layout: str = "NCHW"):
        scale = np.sqrt(2.0 / (in_channels * 9))
        w = rng.standard_normal((out_channels, in_channels, 3, 3)) * scale
        self.weight = Parameter(w.astype(dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), f"{name}.bias")
        self.skip_input_grad = skip_input_grad
        self.layout = layout
        self._cols = None
        self._dims = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        cax = 0 if self.layout == "CNHW" else 1
        if x.ndim != 4 or x.shape[cax] != self.weight.shape[1]:
            raise ShapeMismatch(
                f"conv2d ({self.layout}) expected {self.weight.shape[1]} channels, got {x.shape}")
        if self.layout == "NCHW":
            x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        out = self._forward_cnhw(x)
        if self.layout == "NCHW":
            out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        return out

    # samples per im2col chunk: bounds the column-matrix scratch (and its
    # gradient twin) to a few dozen MB regardless of batch size
    CHUNK = 16

    def _im2col_chunk(self, xp: np.ndarray, s: int, e: int) -> np.ndarray:
        """Column matrix (C*9, (e-s)*H*W) for samples [s, e) of the padded
        input; rebuilt on demand in backward instead of cached whole."""
        c, _, hp, wp = xp.shape
        h, w = hp - 2, wp - 2
        m = e - s
        cols4 = self._scratch(f"cols{m}", (c * 9, m, h, w), xp.dtype)
        i = 0
        for ci in range(c):
            for ki in range(3):
                for kj in range(3):
                    cols4[i] = xp[ci, s:e, ki:ki + h, kj:kj + w]
                    i += 1
        return cols4.reshape(c * 9, m * h * w)

    def _forward_cnhw(self, x: np.ndarray) -> np.ndarray:
        c, n, h, w = x.shape
        f = self.weight.shape[0]
        # zero-padded copy: the border stays zero from buffer initialization
        # (and from previous steps, which share the shape); kept for backward
        xp = self._scratch("xp", (c, n, h + 2, w + 2), x.dtype)
        xp[:, :, 1:-1, 1:-1] = x
        self._dims = (n, c, h, w)
        wmat = self.weight.data.reshape(f, c * 9)
        out = self._scratch("out", (f, n, h, w), x.dtype)
        for s in range(0, n, self.CHUNK):
            e = min(s + self.CHUNK, n)
            m = e - s
            cols = self._im2col_chunk(xp, s, e)
            res = self._scratch(f"res{m}", (f, m, h, w), x.dtype)
            np.matmul(wmat, cols, out=res.reshape(f, m * h * w))
            out[:, s:e] = res
        out2 = out.reshape(f, n * h * w)
        out2 += self.bias.data[:, None]
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray | None:
        if self.layout == "NCHW":
            dout = np.ascontiguousarray(dout.transpose(1, 0, 2, 3))
        dx = self._backward_cnhw(dout)
        if dx is not None and self.layout == "NCHW":
            dx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
        return dx

    def _backward_cnhw(self, dout: np.ndarray) -> np.ndarray | None:
        n, c, h, w = self._dims
        f = self.weight.shape[0]
        xp = self._bufs["xp"]
        wmat = self.weight.data.reshape(f, c * 9)
        self.bias.grad += dout.reshape(f, n * h * w).sum(axis=1)
        dxp = None
        if not self.skip_input_grad:
            dxp = self._scratch("dxp", (c, n, h + 2, w + 2), dout.dtype)
            dxp.fill(0.0)
        for s in range(0, n, self.CHUNK):
            e = min(s + self.CHUNK, n)
            m = e - s
            cols = self._im2col_chunk(xp, s, e)
            dmat = self._scratch(f"dmat{m}", (f, m, h, w), dout.dtype)
            dmat[...] = dout[:, s:e]
            dmat2 = dmat.reshape(f, m * h * w)
            self.weight.grad += (dmat2 @ cols.T).reshape(f, c, 3, 3)
            if dxp is None:
                continue
            dcols = self._scratch(f"dcols{m}", (c * 9, m, h, w), dout.dtype)
            np.matmul(wmat.T, dmat2, out=dcols.reshape(c * 9, m * h * w))
            i = 0
            for ci in range(c):
                for ki in range(3):
                    for kj in range(3):
                        dxp[ci, s:e, ki:ki + h, kj:kj + w] += dcols[i]
                        i += 1
        if dxp is None:
            return None
        dx = self._scratch("dx", (c, n, h, w), dout.dtype)
        dx[...] = dxp[:, :, 1:-1, 1:-1]
        return dx


class BatchNorm2d(Layer):
    """Per-channel batch normalization with running statistics.

    ``track_running`` can be switched off to freeze running stats while still
    normalizing with batch statistics (used by the gradient checker).
    """

    def __init__(self, channels: int, dtype=np.float32, name: str = "bn",
                 momentum: float = 0.1, eps: float = 1e-5, layout: str = "NCHW"):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.layout = layout
        # reduction axes and the broadcast view of per-channel vectors
        if layout == "CNHW":
            self._axes = (1, 2, 3)
            self._bshape = (channels, 1, 1, 1)
        else:
            self._axes = (0, 2, 3)
            self._bshape = (channels, 1, 1)
        self.track_running = True
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def _b(self, v: np.ndarray) -> np.ndarray:
        return v.reshape(self._bshape)

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        cax = 0 if self.layout == "CNHW" else 1
        if x.ndim != 4 or x.shape[cax] != self.gamma.shape[0]:
            raise ShapeMismatch(f"batchnorm expected {self.gamma.shape[0]} channels, got {x.shape}")
        if mode == "train":
            if x.size // x.shape[cax] < 2:
                raise DegenerateBatch("batch statistics need at least 2 values per channel")
            mean = x.mean(axis=self._axes)
            var = x.var(axis=self._axes)
            if self.track_running:
                self.running_mean = ((1 - self.momentum) * self.running_mean
                                     + self.momentum * mean).astype(x.dtype)
                self.running_var = ((1 - self.momentum) * self.running_var
                                    + self.momentum * var).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        # fused affine: out = x * (gamma * inv_std) + (beta - gamma * inv_std * mean);
        # xhat is reconstructed lazily in backward instead of materialized here
        scale = (self.gamma.data * inv_std).astype(x.dtype)
        shift = (self.beta.data - scale * mean).astype(x.dtype)
        self._cache = (x, mean, inv_std, mode)
        out = x * self._b(scale)
        out += self._b(shift)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x, mean, inv_std, mode = self._cache
        self._cache = None
        nch = self.gamma.shape[0]
        if self.layout == "CNHW":
            # per-channel <dout, x> as a batched dot; avoids an xhat-sized temp
            d2 = dout.reshape(nch, 1, -1)
            x2 = x.reshape(nch, -1, 1)
            dot = np.matmul(d2, x2).reshape(nch)
            dout_sum = dout.reshape(nch, -1).sum(axis=1)
        else:
            dot = (dout * x).sum(axis=self._axes)
            dout_sum = dout.sum(axis=self._axes)
        dxhat_sum = inv_std * (dot - mean * dout_sum)
        self.gamma.grad += dxhat_sum
        self.beta.grad += dout_sum
        g = self.gamma.data * inv_std
        if mode != "train":
            return dout * self._b(g.astype(dout.dtype))
        # dx = g * (dout - dout_sum/m - xhat * dxhat_sum/m), expanded so the
        # only xhat-sized temp is the x * p product. The CNHW fast path reuses
        # the upstream gradient buffer, which the extractor chain owns.
        m = dout.size // nch
        p = -(g * inv_std * dxhat_sum / m)
        q = g * (inv_std * mean * dxhat_sum - dout_sum) / m
        if self.layout == "CNHW":
            dx = dout
            dx *= self._b(g.astype(dout.dtype))
        else:
            dx = dout * self._b(g.astype(dout.dtype))
        dx += x * self._b(p.astype(dout.dtype))
        dx += self._b(q.astype(dout.dtype))
        return dx


class ReLU(Layer):
    """``inplace`` rectifies the input buffer and scales the upstream gradient
    in place; only safe when the caller owns both arrays (the extractor does)."""

    def __init__(self, inplace: bool = False):
        self.inplace = inplace
        self._mask = None

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        self._mask = x > 0
        if self.inplace:
            return np.maximum(x, 0.0, out=x)
        return np.maximum(x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        mask, self._mask = self._mask, None
        if self.inplace:
            dout *= mask
            return dout
        return dout * mask


class MaxPool2d(Layer):
    """2x2 max pooling with stride 2; ties route the gradient to the first
    window element in row-major order."""

    _WINDOW_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise OddSpatialDims(f"maxpool needs even H and W, got {h}x{w}")
        r = x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2)
        m = np.maximum(np.maximum(r[..., 0, :, 0], r[..., 0, :, 1]),
                       np.maximum(r[..., 1, :, 0], r[..., 1, :, 1]))
        self._cache = (r, m)
        return m

    def backward(self, dout: np.ndarray) -> np.ndarray:
        r, m = self._cache
        self._cache = None
        dr = self._scratch("dr", r.shape, dout.dtype)
        taken = self._scratch("taken", m.shape, bool)
        taken[...] = False
        for i, j in self._WINDOW_ORDER:
            hit = (r[..., i, :, j] == m) & ~taken
            taken |= hit
            dr[..., i, :, j] = dout * hit
        h2, w2 = m.shape[-2:]
        return dr.reshape(*dout.shape[:-2], h2 * 2, w2 * 2)


class AdaptiveAvgPool2d(Layer):
    """Adaptive average pooling to a 2x2 output.

    Output cell (i, j) averages rows [floor(i*H/2), ceil((i+1)*H/2)) and the
    analogous columns, so odd sizes produce overlapping regions.
    """

    def __init__(self):
        self._cache = None

    @staticmethod
    def _bounds(size: int) -> list[tuple[int, int]]:
        return [(size * i // 2, -(-size * (i + 1) // 2)) for i in range(2)]

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise TooSmall(f"adaptive avg pool needs H,W >= 2, got {h}x{w}")
        out = np.empty((n, c, 2, 2), dtype=x.dtype)
        for i, (r0, r1) in enumerate(self._bounds(h)):
            for j, (c0, c1) in enumerate(self._bounds(w)):
                out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
        self._cache = (h, w)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        h, w = self._cache
        self._cache = None
        n, c = dout.shape[:2]
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        for i, (r0, r1) in enumerate(self._bounds(h)):
            for j, (c0, c1) in enumerate(self._bounds(w)):
                area = (r1 - r0) * (c1 - c0)
                dx[:, :, r0:r1, c0:c1] += dout[:, :, i, j, None, None] / area
        return dx


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "dense"):
        scale = np.sqrt(2.0 / in_features)
        w = rng.standard_normal((out_features, in_features)) * scale
        self.weight = Parameter(w.astype(dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), f"{name}.bias")
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeMismatch(
                f"dense expected (N,{self.weight.shape[1]}), got {x.shape}")
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x, self._x = self._x, None
        self.weight.grad += dout.T @ x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.data


class Dropout(Layer):
    """Inverted dropout: zero with probability p in train mode, scale survivors
    by 1/(1-p); identity in eval mode."""

    def __init__(self, p: float = 0.3):
        if not 0.0 <= p < 1.0:
            raise BadProbability(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x: np.ndarray, mode: str = "train",
                rng: np.random.Generator | None = None) -> np.ndarray:
        if mode != "train" or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an explicit rng")
        self._mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dout
        mask, self._mask = self._mask, None
        return dout * mask


class SoftmaxCrossEntropy:
    """Two-class softmax with mean categorical cross-entropy."""

    def __init__(self):
        self._cache = None

    def forward(self, logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
        if logits.ndim != 2 or logits.shape[1] != 2:
            raise ShapeMismatch(f"expected (N,2) logits, got {logits.shape}")
        targets = np.asarray(targets)
        if targets.shape != (logits.shape[0],) or not np.all((targets == 0) | (targets == 1)):
            raise BadTarget("targets must be class indices in {0,1}, one per row")
        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        probs = ez / ez.sum(axis=1, keepdims=True)
        n = logits.shape[0]
        loss = float(-np.log(probs[np.arange(n), targets] + 1e-300).mean())
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss is {loss}")
        self._cache = (probs, targets)
        return loss, probs

    def backward(self) -> np.ndarray:
        probs, targets = self._cache
        self._cache = None
        n = probs.shape[0]
        grad = probs.copy()
        grad[np.arange(n), targets] -= 1.0
        return grad / n


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Numerically stable row softmax (inference helper)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


class Adam:
    """Adam with bias correction; lr fixed at 1e-3 by default."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != param {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / b1c
            v_hat = self.v[i] / b2c
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.int64)}
        for i, p in enumerate(self.params):
            out[f"adam.m.{i}"] = self.m[i]
            out[f"adam.v.{i}"] = self.v[i]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        self.t = int(tensors["adam.t"][0])
        self.m = [tensors[f"adam.m.{i}"].copy() for i in range(len(self.params))]
        self.v = [tensors[f"adam.v.{i}"].copy() for i in range(len(self.params))]


def gradient_check(loss_fn, params: list[Parameter], h: float = 1e-5,
                   max_coords: int = 200, seed: int = 0, atol: float = 1e-9) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must run a full forward/backward pass, accumulate gradients
    into ``params``, and return the scalar loss. For tensors larger than
    ``max_coords`` a seeded random subset of coordinates is probed. Returns the
    maximum relative error |a - n| / max(|a|, |n|, 1e-12).

    Absolute differences below ``atol`` count as agreement: central differences
    of a double-precision loss carry ~1e-11 of rounding noise at h = 1e-5, so
    coordinates whose true gradient sits at or below that floor (e.g. a conv
    bias that batch normalization cancels exactly) would otherwise report
    spurious O(1) relative errors.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    max_err = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n_coords = flat.size
        if n_coords > max_coords:
            coords = rng.choice(n_coords, size=max_coords, replace=False)
        else:
            coords = np.arange(n_coords)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            for q in params:
                q.zero_grad()
            lp = loss_fn()
            flat[idx] = orig - h
            for q in params:
                q.zero_grad()
            lm = loss_fn()
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * h)
            ana = a.reshape(-1)[idx]
            diff = abs(ana - numeric)
            err = 0.0 if diff < atol else diff / max(abs(ana), abs(numeric), 1e-12)
            max_err = max(max_err, err)
    for p, a in zip(params, analytic):
        p.grad[...] = a
    return max_err
