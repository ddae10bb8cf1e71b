"""Minimal dense-array reverse-mode autodiff engine.

Define-by-run: every operation returns a fresh Tensor holding a closure that
scatters the upstream gradient into its parents. Graphs are rebuilt each
forward pass and tensors that appear in a graph are never mutated in place.

Only the broadcasting patterns the attention maps need are allowed for
binary ops: identical shapes, (C,1,1) against (C,H,W), and (1,H,W) against
(C,H,W). Anything fancier is rejected.
"""

import numpy as np

from .errors import ConfigurationError, UsageError

# Flip to True to assert every tensor is finite at creation time.
DEBUG_CHECK_FINITE = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        if DEBUG_CHECK_FINITE:
            assert np.all(np.isfinite(self.data)), "non-finite tensor values"
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate .grad on every requires_grad node reachable from self.

        Repeated calls without zero_grad accumulate.
        """
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- convenience arithmetic ------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _result(data, parents, backward):
    req = _needs_grad(*parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward if req else None)


def _check_broadcast(sa, sb):
    if sa == sb:
        return
    if len(sa) == 3 and len(sb) == 3:
        # (C,1,1) with (C,H,W) either way round
        if sa[0] == sb[0] and (sa[1:] == (1, 1) or sb[1:] == (1, 1)):
            return
        # (1,H,W) with (C,H,W) either way round
        if sa[1:] == sb[1:] and (sa[0] == 1 or sb[0] == 1):
            return
    raise ConfigurationError(f"shapes {sa} and {sb} are not broadcast-compatible "
                             "(allowed: equal, (C,1,1), (1,H,W))")


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ---------------------------------------------------------

def add(a, b):
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def mul(a, b):
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward)


def scale(a, c):
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _result(a.data * c, (a,), backward)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out))

    return _result(out, (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _result(a.data * mask, (a,), backward)


def tsum(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return _result(a.data.sum(), (a,), backward)


def mean_spatial(a):
    """Global average over (H,W): (C,H,W) -> (C,)."""
    if a.data.ndim != 3:
        raise ConfigurationError(f"mean_spatial expects (C,H,W), got {a.shape}")
    n = a.shape[1] * a.shape[2]
    out = a.data.mean(axis=(1, 2))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g[:, None, None] / n, a.shape).copy())

    return _result(out, (a,), backward)


def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _result(out, (a,), backward)


def stop_gradient(a):
    """Value passes through; backward contributes nothing to parents."""
    return Tensor(a.data.copy(), requires_grad=False)


# -- structure ------------------------------------------------------------

def concat_channels(a, b):
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ConfigurationError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    c1 = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:c1])
        if b.requires_grad:
            b._accumulate(g[c1:])

    return _result(out, (a, b), backward)


def slice_channels(a, start, stop):
    out = a.data[start:stop]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a._accumulate(full)

    return _result(out, (a,), backward)


def subsample(a, stride):
    """Naive strided subsampling along both spatial axes of (C,H,W)."""
    s = int(stride)
    out = a.data[:, ::s, ::s]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, ::s, ::s] = g
            a._accumulate(full)

    return _result(out, (a,), backward)


def _reflect_index(n, pad):
    if pad >= n:
        raise ConfigurationError(f"reflect padding {pad} needs extent > {pad}, got {n}")
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    idx = (n - 1) - np.abs((n - 1) - idx)
    return idx


def pad_reflect(a, pad):
    """Reflect-pad the spatial axes of (C,H,W) by `pad` on every side."""
    if pad == 0:
        return a
    C, H, W = a.shape
    iy = _reflect_index(H, pad)
    ix = _reflect_index(W, pad)
    out = a.data[:, iy][:, :, ix]

    def backward(g):
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            np.add.at(gx, (np.arange(C)[:, None, None], iy[None, :, None], ix[None, None, :]), g)
            a._accumulate(gx)

    return _result(out, (a,), backward)


# -- linear algebra --------------------------------------------------------

def linear(x, weights, bias):
    """Affine map: (N,) x (M,N) + (M,) -> (M,)."""
    if x.data.ndim != 1 or weights.data.ndim != 2 or bias.data.ndim != 1:
        raise ConfigurationError("linear expects x:(N,), weights:(M,N), bias:(M,)")
    if weights.shape[1] != x.shape[0] or weights.shape[0] != bias.shape[0]:
        raise ConfigurationError(
            f"linear shape mismatch: x {x.shape}, weights {weights.shape}, bias {bias.shape}")
    out = weights.data @ x.data + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(weights.data.T @ g)
        if weights.requires_grad:
            weights._accumulate(np.outer(g, x.data))
        if bias.requires_grad:
            bias._accumulate(g)

    return _result(out, (x, weights, bias), backward)


def matvec_const(mat, x):
    """Multiply by a constant matrix: out = mat @ x, differentiable in x only."""
    out = mat @ x.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(mat.T @ g)

    return _result(out, (x,), backward)


# -- convolution -----------------------------------------------------------

def _patches(padded, k, stride):
    # padded: (C, Hp, Wp) -> (C, H', W', k, k)
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, kernels, stride=1, padding=0):
    """Cross-correlation: x (C_in,H,W), kernels (C_out,C_in,k,k) -> (C_out,H',W')."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ConfigurationError("conv2d expects x:(C,H,W), kernels:(C_out,C_in,k,k)")
    c_in, H, W = x.shape
    c_out, kc_in, k, k2 = kernels.shape
    if k != k2:
        raise ConfigurationError("conv2d kernels must be square")
    if kc_in != c_in:
        raise ConfigurationError(f"conv2d channel mismatch: input {c_in}, kernels expect {kc_in}")
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ConfigurationError(f"kernel {k} larger than padded input ({H}+2*{padding})")
    s = int(stride)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    pat = _patches(xp, k, s)
    out = np.tensordot(kernels.data, pat, axes=([1, 2, 3], [0, 3, 4]))
    Ho, Wo = out.shape[1:]

    def backward(g):
        if kernels.requires_grad:
            kernels._accumulate(np.tensordot(g, pat, axes=([1, 2], [1, 2])))
        if x.requires_grad:
            gpad = np.zeros_like(xp)
            for p in range(k):
                for q in range(k):
                    gpad[:, p:p + s * Ho:s, q:q + s * Wo:s] += np.tensordot(
                        kernels.data[:, :, p, q], g, axes=([0], [0]))
            if padding:
                gpad = gpad[:, padding:-padding, padding:-padding]
            x._accumulate(gpad)

    return _result(out, (x, kernels), backward)


def deconv2d(x, kernels, stride):
    """Transposed convolution: x (C_in,H,W), kernels (C_in,C_out,k,k) with
    k = 2*stride -> (C_out, H*stride, W*stride)."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ConfigurationError("deconv2d expects x:(C,H,W), kernels:(C_in,C_out,k,k)")
    c_in, H, W = x.shape
    kc_in, c_out, k, k2 = kernels.shape
    s = int(stride)
    if k != k2 or k != 2 * s:
        raise ConfigurationError(f"deconv2d kernel must be square with k = 2*stride, got k={k}, stride={s}")
    if kc_in != c_in:
        raise ConfigurationError(f"deconv2d channel mismatch: input {c_in}, kernels expect {kc_in}")
    crop = (k - s) // 2
    full_h, full_w = (H - 1) * s + k, (W - 1) * s + k

    full = np.zeros((c_out, full_h, full_w))
    for p in range(k):
        for q in range(k):
            full[:, p:p + s * H:s, q:q + s * W:s] += np.tensordot(
                kernels.data[:, :, p, q], x.data, axes=([0], [0]))
    out = full[:, crop:crop + H * s, crop:crop + W * s]

    def backward(g):
        gfull = np.zeros((c_out, full_h, full_w))
        gfull[:, crop:crop + H * s, crop:crop + W * s] = g
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for p in range(k):
                for q in range(k):
                    gx += np.tensordot(kernels.data[:, :, p, q],
                                       gfull[:, p:p + s * H:s, q:q + s * W:s],
                                       axes=([1], [0]))
            x._accumulate(gx)
        if kernels.requires_grad:
            gk = np.zeros_like(kernels.data)
            for p in range(k):
                for q in range(k):
                    gk[:, :, p, q] = np.tensordot(
                        x.data, gfull[:, p:p + s * H:s, q:q + s * W:s],
                        axes=([1, 2], [1, 2]))
            kernels._accumulate(gk)

    return _result(out, (x, kernels), backward)


def softmax_axis0(a):
    """Softmax over axis 0 of a (K,H,W) tensor, per spatial location."""
    z = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=0, keepdims=True)
            a._accumulate(out * (g - dot))

    return _result(out, (a,), backward)


def cross_entropy(logits, label):
    """Softmax cross-entropy of a (J,) logit vector against an integer label."""
    J = logits.shape[0]
    label = int(label)
    if not 0 <= label < J:
        raise ConfigurationError(f"label {label} out of range for {J} classes")
    z = logits.data - logits.data.max()
    logits_exp = np.exp(z)
    probs = logits_exp / logits_exp.sum()
    loss = -np.log(max(probs[label], 1e-300))

    def backward(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[label] -= 1.0
            logits._accumulate(float(g) * grad)

    return _result(loss, (logits,), backward)


def numerical_gradient(f, x, h=1e-5):
    """Central finite differences of scalar-valued f at ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
