"""Minimal numpy neural-net layers with explicit forward/backward passes.

Every module follows the same contract: ``forward(x, train=...)`` caches
whatever the backward pass needs (only when ``train=True``), ``backward(g)``
accumulates parameter gradients and returns the gradient w.r.t. the input.
All parameters are plain float arrays owned by :class:`Param` objects so the
optimizer and checkpoint code can treat them uniformly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Param:
    """A named trainable array with an accumulated gradient.

    ``decay`` marks whether L2 weight decay applies (BN scale/shift are
    exempt).
    """

    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = True):
        self.name = name
        self.value = value
        self.grad: np.ndarray | None = None
        self.decay = decay

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


class Module:
    """Base class; subclasses define forward/backward and expose state."""

    def params(self):
        """Yield all Param objects, depth first."""
        return iter(())

    def buffers(self):
        """Yield (name, array) pairs for non-trainable state (BN stats)."""
        return iter(())

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value for p in self.params()}
        state.update({name: buf for name, buf in self.buffers()})
        return state

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy matching arrays from ``state`` into this module's params/buffers."""
        for p in self.params():
            if p.name in state:
                _copy_into(p.name, p.value, state[p.name])
            elif strict:
                raise KeyError(f"missing tensor in state: {p.name}")
        for name, buf in self.buffers():
            if name in state:
                _copy_into(name, buf, state[name])
            elif strict:
                raise KeyError(f"missing tensor in state: {name}")


def _copy_into(name: str, dst: np.ndarray, src: np.ndarray) -> None:
    if tuple(dst.shape) != tuple(src.shape):
        raise ValueError(
            f"shape mismatch for tensor '{name}': expected {tuple(dst.shape)}, "
            f"archive has {tuple(src.shape)}"
        )
    dst[...] = src.astype(dst.dtype, copy=False)


def he_std(fan: int) -> float:
    return float(np.sqrt(2.0 / fan))


# ---------------------------------------------------------------------------
# im2col / col2im


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold [N,C,H,W] into [N, C*kh*kw, OH*OW] patch columns."""
    n, c, _, _ = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int,
           oh: int, ow: int) -> np.ndarray:
    """Scatter-add patch-column gradients back to input layout."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d6[:, :, i, j]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


# ---------------------------------------------------------------------------
# Layers


class Conv2d(Module):
    """2-D convolution without bias (a BN layer always follows)."""

    def __init__(self, cin: int, cout: int, ksize: int, stride: int = 1,
                 pad: int = 0, *, rng: np.random.Generator, name: str,
                 dtype=np.float32, init: str = "fan_out"):
        self.cin, self.cout = cin, cout
        self.ksize, self.stride, self.pad = ksize, stride, pad
        fan = cout * ksize * ksize if init == "fan_out" else cin * ksize * ksize
        w = rng.normal(0.0, he_std(fan), size=(cout, cin, ksize, ksize))
        self.w = Param(f"{name}.w", w.astype(dtype))
        self._cache = None

    def params(self):
        yield self.w

    def forward(self, x, train=False):
        cols, oh, ow = im2col(x, self.ksize, self.ksize, self.stride, self.pad)
        w2 = self.w.value.reshape(self.cout, -1)
        out = np.matmul(w2[None], cols).reshape(x.shape[0], self.cout, oh, ow)
        if train:
            self._cache = (cols, x.shape, oh, ow)
        return out

    def backward(self, g):
        cols, x_shape, oh, ow = self._cache
        n = x_shape[0]
        g2 = g.reshape(n, self.cout, oh * ow)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        self.w.add_grad(dw.reshape(self.w.value.shape))
        w2 = self.w.value.reshape(self.cout, -1)
        dcols = np.matmul(w2.T[None], g2)
        self._cache = None
        return col2im(dcols, x_shape, self.ksize, self.ksize, self.stride,
                      self.pad, oh, ow)


class _BatchNorm(Module):
    """Shared batch-norm logic; axes differ between the 1d/2d variants."""

    def __init__(self, num_features: int, *, name: str, dtype=np.float32,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(f"{name}.gamma", np.ones(num_features, dtype=dtype), decay=False)
        self.beta = Param(f"{name}.beta", np.zeros(num_features, dtype=dtype), decay=False)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self._name = name
        self._cache = None

    _axes: tuple[int, ...] = (0,)

    def params(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield f"{self._name}.running_mean", self.running_mean
        yield f"{self._name}.running_var", self.running_var

    def _shape(self, x):
        s = [1] * x.ndim
        s[1] = self.num_features
        return tuple(s)

    def forward(self, x, train=False):
        shp = self._shape(x)
        if train:
            mean = x.mean(axis=self._axes)
            var = x.var(axis=self._axes)
            invstd = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(shp)) * invstd.reshape(shp)
            cnt = x.size // self.num_features
            unbiased = var * (cnt / max(cnt - 1, 1))
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * unbiased
            self._cache = (xhat, invstd, cnt)
        else:
            invstd = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(shp)) * invstd.reshape(shp)
        return self.gamma.value.reshape(shp) * xhat + self.beta.value.reshape(shp)

    def backward(self, g):
        xhat, invstd, cnt = self._cache
        shp = self._shape(g)
        self.gamma.add_grad((g * xhat).sum(axis=self._axes))
        self.beta.add_grad(g.sum(axis=self._axes))
        dxhat = g * self.gamma.value.reshape(shp)
        s1 = dxhat.sum(axis=self._axes).reshape(shp)
        s2 = (dxhat * xhat).sum(axis=self._axes).reshape(shp)
        dx = (invstd.reshape(shp) / cnt) * (cnt * dxhat - s1 - xhat * s2)
        self._cache = None
        return dx


class BatchNorm2d(_BatchNorm):
    _axes = (0, 2, 3)


class BatchNorm1d(_BatchNorm):
    _axes = (0,)


class ReLU(Module):
    def __init__(self):
        self._mask = None

    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, g):
        out = g * self._mask
        self._mask = None
        return out


class MaxPool2d(Module):
    def __init__(self, ksize: int = 3, stride: int = 2, pad: int = 1):
        self.ksize, self.stride, self.pad = ksize, stride, pad
        self._cache = None

    def forward(self, x, train=False):
        k, s, p = self.ksize, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        oh, ow = win.shape[2], win.shape[3]
        flat = win.reshape(*win.shape[:4], k * k)
        idx = flat.argmax(axis=4)
        out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
        if train:
            self._cache = (idx, x.shape, oh, ow)
        return np.ascontiguousarray(out)

    def backward(self, g):
        idx, x_shape, oh, ow = self._cache
        k, s, p = self.ksize, self.stride, self.pad
        n, c, h, w = x_shape
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for win_pos in range(k * k):
            i, j = divmod(win_pos, k)
            contrib = g * (idx == win_pos)
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += contrib
        self._cache = None
        return dxp[:, :, p:p + h, p:p + w]


class Linear(Module):
    """Fully-connected layer, bias-free by default."""

    def __init__(self, cin: int, cout: int, *, rng: np.random.Generator,
                 name: str, dtype=np.float32, std: float | None = None):
        if std is None:
            std = he_std(cin)
        self.w = Param(f"{name}.w", rng.normal(0.0, std, size=(cout, cin)).astype(dtype))
        self._x = None

    def params(self):
        yield self.w

    def forward(self, x, train=False):
        if train:
            self._x = x
        # one [1,k]@[k,d] product per row: output rows are bitwise independent
        # of how many samples share the batch (BLAS would otherwise pick
        # different kernels for different batch heights)
        return np.matmul(x[:, None, :], self.w.value.T[None])[:, 0, :]

    def backward(self, g):
        self.w.add_grad(g.T @ self._x)
        dx = g @ self.w.value
        self._x = None
        return dx


class Sequential(Module):
    def __init__(self, *mods: Module):
        self.mods = list(mods)

    def params(self):
        for m in self.mods:
            yield from m.params()

    def buffers(self):
        for m in self.mods:
            yield from m.buffers()

    def forward(self, x, train=False):
        for m in self.mods:
            x = m.forward(x, train=train)
        return x

    def backward(self, g):
        for m in reversed(self.mods):
            g = m.backward(g)
        return g


class Bottleneck(Module):
    """Residual bottleneck: 1x1 reduce, 3x3 (carries the stride), 1x1 expand."""

    def __init__(self, cin: int, mid: int, cout: int, stride: int, *,
                 rng: np.random.Generator, name: str, dtype=np.float32):
        self.conv1 = Conv2d(cin, mid, 1, rng=rng, name=f"{name}.conv1", dtype=dtype)
        self.bn1 = BatchNorm2d(mid, name=f"{name}.bn1", dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(mid, mid, 3, stride=stride, pad=1, rng=rng,
                            name=f"{name}.conv2", dtype=dtype)
        self.bn2 = BatchNorm2d(mid, name=f"{name}.bn2", dtype=dtype)
        self.relu2 = ReLU()
        self.conv3 = Conv2d(mid, cout, 1, rng=rng, name=f"{name}.conv3", dtype=dtype)
        self.bn3 = BatchNorm2d(cout, name=f"{name}.bn3", dtype=dtype)
        self.relu_out = ReLU()
        if stride != 1 or cin != cout:
            self.down_conv = Conv2d(cin, cout, 1, stride=stride, rng=rng,
                                    name=f"{name}.down_conv", dtype=dtype)
            self.down_bn = BatchNorm2d(cout, name=f"{name}.down_bn", dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None

    def _children(self):
        mods = [self.conv1, self.bn1, self.conv2, self.bn2, self.conv3, self.bn3]
        if self.down_conv is not None:
            mods += [self.down_conv, self.down_bn]
        return mods

    def params(self):
        for m in self._children():
            yield from m.params()

    def buffers(self):
        for m in self._children():
            yield from m.buffers()

    def forward(self, x, train=False):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.relu2.forward(self.bn2.forward(self.conv2.forward(h, train), train), train)
        h = self.bn3.forward(self.conv3.forward(h, train), train)
        if self.down_conv is not None:
            s = self.down_bn.forward(self.down_conv.forward(x, train), train)
        else:
            s = x
        return self.relu_out.forward(h + s, train)

    def backward(self, g):
        g = self.relu_out.backward(g)
        gh = self.conv1.backward(self.bn1.backward(self.relu1.backward(
            self.conv2.backward(self.bn2.backward(self.relu2.backward(
                self.conv3.backward(self.bn3.backward(g))))))))
        if self.down_conv is not None:
            gs = self.down_conv.backward(self.down_bn.backward(g))
        else:
            gs = g
        return gh + gs
