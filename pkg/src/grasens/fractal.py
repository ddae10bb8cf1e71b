"""Fractal-dimension estimation and the attention maps it drives.

Differential box counting on gray-level surfaces: the map is min-max
normalized to [0, G-1] gray levels, partitioned into eps x eps cells at each
scale, and each cell contributes ceil(max/s) - ceil(min/s) + 1 boxes with
box height s = eps * G / min(H, W). The dimension is the least-squares slope
of log eta(eps) against log(1/eps).

Counting is not differentiable, so FD values enter the graph as constants;
training moves only the MLP / conv parameters of the attention heads.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError

log = logging.getLogger(__name__)

GRAY_LEVELS = 256

# Single-pixel cells have zero value span and poison the log-log fit, so the
# default scale set stops at 2.
DEFAULT_SCALES = (8, 4, 2)


@dataclass(frozen=True)
class FdSpec:
    scales: tuple = DEFAULT_SCALES
    gray_levels: int = GRAY_LEVELS

    def __post_init__(self):
        sc = tuple(self.scales)
        if len(sc) < 2:
            raise ConfigurationError("FdSpec needs at least 2 scales")
        if any(e < 1 for e in sc):
            raise ConfigurationError("FdSpec scales must be >= 1")
        if any(a <= b for a, b in zip(sc, sc[1:])):
            raise ConfigurationError("FdSpec scales must be strictly decreasing")
        object.__setattr__(self, "scales", sc)

    def usable_scales(self, extent):
        sc = [e for e in self.scales if e <= extent]
        if len(sc) < 2:
            sc = self.scales[-2:]
        return sc


def _normalize(values, gray_levels, axis=None):
    lo = values.min(axis=axis, keepdims=axis is not None)
    hi = values.max(axis=axis, keepdims=axis is not None)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (values - lo) / safe * (gray_levels - 1), 0.0)


def _fit_slope(log_inv_eps, log_counts, axis=0):
    x = np.asarray(log_inv_eps, dtype=np.float64)
    y = np.asarray(log_counts, dtype=np.float64)
    n = x.shape[0]
    xm = x.mean()
    shape = (n,) + (1,) * (y.ndim - 1)
    xc = (x - xm).reshape(shape)
    return (xc * (y - y.mean(axis=0))).sum(axis=0) / (xc ** 2).sum()


def estimate_fd_channel(values, spec=FdSpec()):
    """Differential box counting FD of one 2D value surface."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigurationError(f"estimate_fd_channel expects a 2D map, got {values.shape}")
    H, W = values.shape
    G = spec.gray_levels
    z = _normalize(values, G)
    scales = spec.usable_scales(max(H, W))
    log_x, log_y = [], []
    for eps in scales:
        s = eps * G / min(H, W)
        ny, nx = -(-H // eps), -(-W // eps)
        total = 0.0
        for cy in range(ny):
            rows = z[cy * eps:(cy + 1) * eps]
            # per-cell extrema along the row band, vectorized over cells
            pad = (-rows.shape[1]) % eps
            band = np.pad(rows, ((0, 0), (0, pad)), mode="edge") if pad else rows
            cells = band.reshape(rows.shape[0], nx, eps)
            cmax = cells.max(axis=(0, 2))
            cmin = cells.min(axis=(0, 2))
            total += (np.ceil(cmax / s) - np.ceil(cmin / s) + 1.0).sum()
        log_x.append(np.log(1.0 / eps))
        log_y.append(np.log(total))
    return float(_fit_slope(np.array(log_x), np.array(log_y)))


def fd_per_channel(data, spec=FdSpec()):
    """FD of each channel plane of a (C,H,W) array -> (C,) vector."""
    return np.array([estimate_fd_channel(plane, spec) for plane in data])


def fd_across_channels(data, spec=FdSpec()):
    """Local FD map: 1D box counting of the C-length profile at each (h, w).

    Returns an (H, W) array. With fewer than 2 channels there is no profile
    to count, so an all-ones map is returned with a warning.
    """
    data = np.asarray(data, dtype=np.float64)
    C, H, W = data.shape
    if C < 2:
        log.warning("fd_across_channels: %d channel(s) gives no profile; using all-ones map", C)
        return np.ones((H, W))
    G = spec.gray_levels
    z = _normalize(data, G, axis=0)
    scales = [e for e in spec.scales if e <= C]
    if len(scales) < 2:
        scales = sorted({max(1, C // 2), 1}, reverse=True)
        if len(scales) < 2:
            scales = [2, 1]
    log_x, log_y = [], []
    for eps in scales:
        s = eps * G / C
        ncells = -(-C // eps)
        counts = np.zeros((H, W))
        for c in range(ncells):
            cell = z[c * eps:(c + 1) * eps]
            counts += np.ceil(cell.max(axis=0) / s) - np.ceil(cell.min(axis=0) / s) + 1.0
        log_x.append(np.log(1.0 / eps))
        log_y.append(np.log(counts))
    return _fit_slope(np.array(log_x), np.stack(log_y))


@dataclass
class TemporalAttention:
    """Channel gate: FD per channel -> MLP (C -> C/r -> C) -> sigmoid -> (C,1,1)."""
    w1: T.Tensor  # (hidden, C)
    b1: T.Tensor
    w2: T.Tensor  # (C, hidden)
    b2: T.Tensor

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class FrequencyAttention:
    """Spatial gate: cross-channel FD map -> 7x7 conv -> sigmoid -> (1,H,W)."""
    kernel: T.Tensor  # (1, 1, 7, 7)
    bias: T.Tensor    # (1,)

    def parameters(self):
        return {"kernel": self.kernel, "bias": self.bias}


def init_temporal(channels, reduction=8, seed=0, trainable=True):
    rng = np.random.default_rng(seed)
    hidden = max(1, channels // reduction)
    return TemporalAttention(
        w1=T.Tensor(rng.normal(scale=1.0 / np.sqrt(channels), size=(hidden, channels)),
                    requires_grad=trainable),
        b1=T.Tensor(np.zeros(hidden), requires_grad=trainable),
        w2=T.Tensor(rng.normal(scale=1.0 / np.sqrt(hidden), size=(channels, hidden)),
                    requires_grad=trainable),
        b2=T.Tensor(np.zeros(channels), requires_grad=trainable),
    )


def init_frequency(kernel_size=7, seed=0, trainable=True):
    rng = np.random.default_rng(seed)
    return FrequencyAttention(
        kernel=T.Tensor(rng.normal(scale=1.0 / kernel_size,
                                   size=(1, 1, kernel_size, kernel_size)),
                        requires_grad=trainable),
        bias=T.Tensor(np.zeros(1), requires_grad=trainable),
    )


def temporal_attention(f, att, spec=FdSpec()):
    """(C,H,W) feature map -> (C,1,1) gate in (0,1)."""
    fd = T.Tensor(fd_per_channel(f.data, spec))  # constant: counting has no gradient
    h = T.relu(T.linear(fd, att.w1, att.b1))
    out = T.sigmoid(T.linear(h, att.w2, att.b2))
    return T.reshape(out, (f.shape[0], 1, 1))


def frequency_attention(f, att, spec=FdSpec()):
    """(C,H,W) feature map -> (1,H,W) gate in (0,1)."""
    fd_map = T.Tensor(fd_across_channels(f.data, spec)[None])  # constant
    k = att.kernel.shape[-1]
    conv = T.conv2d(T.pad_reflect(fd_map, k // 2), att.kernel, stride=1, padding=0)
    return T.sigmoid(T.add(conv, T.reshape(att.bias, (1, 1, 1))))


def apply_attention(f, att_t, att_f, spec=FdSpec()):
    """Sequential gating, temporal first: f' = M_t(f) * f, f'' = M_f(f') * f'."""
    mt = temporal_attention(f, att_t, spec)
    f1 = T.mul(mt, f)
    mf = frequency_attention(f1, att_f, spec)
    return T.mul(mf, f1)
