"""Low-pass blur filtering and anti-aliased downsampling.

Depthwise filtering with reflect padding, then subsampling by the stride.
Fixed mode uses the normalized binomial kernel (outer product of [1,2,1] for
k=3). Predicted mode derives a per-location filter field from a 1x1
convolution over the input, softmax-normalized so every location's weights
are non-negative and sum to 1.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError


@dataclass
class BlurSpec:
    kernel_size: int = 3
    stride: int = 2
    mode: str = "fixed-binomial"  # or "predicted"
    groups: int = 1

    def __post_init__(self):
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigurationError("blur kernel_size must be odd and positive")
        if self.stride < 1:
            raise ConfigurationError("blur stride must be positive")
        if self.mode not in ("fixed-binomial", "predicted"):
            raise ConfigurationError(f"unknown blur mode {self.mode!r}")
        if self.groups < 1:
            raise ConfigurationError("blur groups must be >= 1")


def binomial_kernel(k):
    """Normalized outer product of the binomial row of length k."""
    row = np.array([1.0])
    for _ in range(k - 1):
        row = np.convolve(row, [1.0, 1.0])
    kern = np.outer(row, row)
    return kern / kern.sum()


def blur_fixed(x, k=3, stride=2):
    """Depthwise binomial blur with reflect padding: (C,H,W) -> (C, ceil(H/s), ceil(W/s))."""
    kern = binomial_kernel(k)
    C, H, W = x.shape
    s = int(stride)
    pad = k // 2
    xp = T.pad_reflect(x, pad)
    padded = xp.data
    out = np.zeros((C, -(-H // s), -(-W // s)))
    Ho, Wo = out.shape[1:]
    for p in range(k):
        for q in range(k):
            out += kern[p, q] * padded[:, p:p + s * Ho:s, q:q + s * Wo:s]

    def backward(g):
        if xp.requires_grad:
            gpad = np.zeros_like(padded)
            for p in range(k):
                for q in range(k):
                    gpad[:, p:p + s * Ho:s, q:q + s * Wo:s] += kern[p, q] * g
            xp._accumulate(gpad)

    req = xp.requires_grad
    return T.Tensor(out, requires_grad=req, _parents=(xp,) if req else (),
                    _backward=backward if req else None)


def blur_weighted(x, psi, k, stride):
    """Blur (C,H,W) with a per-location filter field psi of shape (k*k, H, W).

    psi is sampled at the output grid (stride positions); differentiable in
    both x and psi.
    """
    C, H, W = x.shape
    if psi.shape != (k * k, H, W):
        raise ConfigurationError(f"psi shape {psi.shape} != ({k*k}, {H}, {W})")
    s = int(stride)
    pad = k // 2
    xp = T.pad_reflect(x, pad)
    padded = xp.data
    Ho, Wo = -(-H // s), -(-W // s)
    psis = psi.data[:, ::s, ::s]  # (k*k, Ho, Wo)
    out = np.zeros((C, Ho, Wo))
    for p in range(k):
        for q in range(k):
            out += psis[p * k + q][None] * padded[:, p:p + s * Ho:s, q:q + s * Wo:s]

    def backward(g):
        if xp.requires_grad:
            gpad = np.zeros_like(padded)
            for p in range(k):
                for q in range(k):
                    gpad[:, p:p + s * Ho:s, q:q + s * Wo:s] += psis[p * k + q][None] * g
            xp._accumulate(gpad)
        if psi.requires_grad:
            gpsi = np.zeros_like(psi.data)
            for p in range(k):
                for q in range(k):
                    gpsi[p * k + q, ::s, ::s] = (
                        g * padded[:, p:p + s * Ho:s, q:q + s * Wo:s]).sum(axis=0)
            psi._accumulate(gpsi)

    req = xp.requires_grad or psi.requires_grad
    return T.Tensor(out, requires_grad=req,
                    _parents=(xp, psi) if req else (),
                    _backward=backward if req else None)


@dataclass
class FilterPredictor:
    """1x1 conv emitting k^2 softmax-normalized filter logits per location,
    one filter field per channel group."""
    weights: T.Tensor  # (k*k*groups, C_in, 1, 1)
    bias: T.Tensor     # (k*k*groups,)
    kernel_size: int
    groups: int

    def parameters(self):
        return {"weights": self.weights, "bias": self.bias}


def init_predictor(c_in, k=3, groups=1, seed=0, trainable=True):
    rng = np.random.default_rng(seed)
    n_out = k * k * groups
    w = rng.normal(scale=1.0 / np.sqrt(c_in), size=(n_out, c_in, 1, 1))
    return FilterPredictor(
        weights=T.Tensor(w, requires_grad=trainable),
        bias=T.Tensor(np.zeros(n_out), requires_grad=trainable),
        kernel_size=k, groups=groups)


def predict_filters(x, predictor):
    """Per-location filter fields: list of (k*k, H, W) tensors, one per group.

    Softmax normalization guarantees non-negative weights summing to 1 at
    every location; zero predictor weights give the uniform 1/k^2 box filter.
    """
    k, G = predictor.kernel_size, predictor.groups
    logits = T.conv2d(x, predictor.weights, stride=1, padding=0)
    logits = T.add(logits, T.reshape(predictor.bias, (k * k * G, 1, 1)))
    return [T.softmax_axis0(T.slice_channels(logits, g * k * k, (g + 1) * k * k))
            for g in range(G)]


def blur(x, spec, predictor=None):
    """Anti-aliased blur per BlurSpec: stride 1 = pure low-pass, stride 2 =
    anti-aliased downsample."""
    if spec.mode == "fixed-binomial":
        return blur_fixed(x, k=spec.kernel_size, stride=spec.stride)
    if predictor is None:
        raise ConfigurationError("predicted blur mode needs a FilterPredictor")
    C = x.shape[0]
    G = predictor.groups
    if C % G != 0:
        raise ConfigurationError(f"channels {C} not divisible by blur groups {G}")
    fields = predict_filters(x, predictor)
    size = C // G
    parts = []
    for g, field_g in enumerate(fields):
        xg = T.slice_channels(x, g * size, (g + 1) * size)
        parts.append(blur_weighted(xg, field_g, predictor.kernel_size, spec.stride))
    out = parts[0]
    for part in parts[1:]:
        out = T.concat_channels(out, part)
    return out
