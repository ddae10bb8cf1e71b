"""Gabor filter bank: trainable (omega, theta, psi, sigma) quadruples from
which kernels are synthesized fresh on every forward pass.

Kernel formula (cross-correlation convention, no flip):
  g(x, y) = exp(-(x'^2 + y'^2) / (2 sigma^2)) * cos(omega * x' + psi)
  x' =  x cos(theta) + y sin(theta)
  y' = -x sin(theta) + y cos(theta)
with (x, y) integer offsets from the kernel center. Since the rotation is
orthogonal, x'^2 + y'^2 = x^2 + y^2 and the Gaussian envelope is isotropic.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError

N_FREQUENCIES = 5
N_ORIENTATIONS = 8
N_FILTERS = N_FREQUENCIES * N_ORIENTATIONS  # 40
SIGMA_FLOOR = 1e-3


def frequency_grid():
    """omega_n = (pi/2) * sqrt(2)^-(n-1), n = 1..5."""
    return np.array([(math.pi / 2) * math.sqrt(2) ** (-(n - 1))
                     for n in range(1, N_FREQUENCIES + 1)])


def orientation_grid():
    """theta_m = (pi/8) * (m-1), m = 1..8."""
    return np.array([(math.pi / 8) * (m - 1) for m in range(1, N_ORIENTATIONS + 1)])


@dataclass
class GaborLayer:
    """One (omega, theta, psi, sigma) quadruple per (output filter, input channel)."""
    omega: T.Tensor   # (C_out, C_in)
    theta: T.Tensor
    psi: T.Tensor
    sigma: T.Tensor
    kernel_size: int = 5

    @property
    def c_out(self):
        return self.omega.shape[0]

    @property
    def c_in(self):
        return self.omega.shape[1]

    def parameters(self):
        return {"omega": self.omega, "theta": self.theta,
                "psi": self.psi, "sigma": self.sigma}


def init_grid(c_in, kernel_size=5, seed=0, trainable=True):
    """40 filters: index f = 8*(n-1) + (m-1) carries (omega_n, theta_m);
    sigma = pi/omega_n; psi drawn U(0, pi)."""
    if kernel_size % 2 == 0:
        raise ConfigurationError("kernel_size must be odd")
    rng = np.random.default_rng(seed)
    omegas = frequency_grid()
    thetas = orientation_grid()
    om = np.empty(N_FILTERS)
    th = np.empty(N_FILTERS)
    for n in range(N_FREQUENCIES):
        for m in range(N_ORIENTATIONS):
            f = N_ORIENTATIONS * n + m
            om[f] = omegas[n]
            th[f] = thetas[m]
    om = np.repeat(om[:, None], c_in, axis=1)
    th = np.repeat(th[:, None], c_in, axis=1)
    sg = math.pi / om
    ps = rng.uniform(0.0, math.pi, size=(N_FILTERS, c_in))
    return GaborLayer(
        omega=T.Tensor(om, requires_grad=trainable),
        theta=T.Tensor(th, requires_grad=trainable),
        psi=T.Tensor(ps, requires_grad=trainable),
        sigma=T.Tensor(sg, requires_grad=trainable),
        kernel_size=kernel_size,
    )


def synthesize_kernels(layer):
    """Synthesize the full (C_out, C_in, k, k) kernel bank, differentiable
    w.r.t. all four parameter arrays.

    sigma is clamped to >= SIGMA_FLOOR inside the synthesis; the clamp is
    outside the gradient path (zero gradient below the floor).
    """
    om, th, ps = layer.omega, layer.theta, layer.psi
    sg = layer.sigma
    k = layer.kernel_size
    half = k // 2
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)

    o = om.data[..., None, None]
    t = th.data[..., None, None]
    p = ps.data[..., None, None]
    clamped = np.maximum(sg.data, SIGMA_FLOOR)
    s = clamped[..., None, None]
    active = (sg.data >= SIGMA_FLOOR)[..., None, None]

    xr = xs * np.cos(t) + ys * np.sin(t)     # x'
    yr = -xs * np.sin(t) + ys * np.cos(t)    # y'
    r2 = xs ** 2 + ys ** 2                   # == x'^2 + y'^2
    envelope = np.exp(-r2 / (2.0 * s ** 2))
    phase = o * xr + p
    out = envelope * np.cos(phase)

    def backward(g):
        sin_term = envelope * np.sin(phase)
        if om.requires_grad:
            om._accumulate((-g * sin_term * xr).sum(axis=(-2, -1)))
        if th.requires_grad:
            # d(x')/d(theta) = y'
            th._accumulate((-g * sin_term * o * yr).sum(axis=(-2, -1)))
        if ps.requires_grad:
            ps._accumulate((-g * sin_term).sum(axis=(-2, -1)))
        if sg.requires_grad:
            dsg = g * out * r2 / s ** 3 * active
            sg._accumulate(dsg.sum(axis=(-2, -1)))

    parents = (om, th, ps, sg)
    req = any(x.requires_grad for x in parents)
    return T.Tensor(out, requires_grad=req, _parents=parents if req else (),
                    _backward=backward if req else None)


def synthesize_kernel(omega, theta, psi, sigma, kernel_size):
    """Single (k, k) kernel from scalar parameters, as a plain array."""
    layer = GaborLayer(
        omega=T.Tensor([[omega]]), theta=T.Tensor([[theta]]),
        psi=T.Tensor([[psi]]), sigma=T.Tensor([[sigma]]),
        kernel_size=kernel_size)
    return synthesize_kernels(layer).data[0, 0]


def gabor_conv(x, layer):
    """Gabor convolution: kernels synthesized from current params, then
    stride-1 same-padding cross-correlation. (C_in,H,W) -> (C_out,H,W)."""
    if x.shape[0] != layer.c_in:
        raise ConfigurationError(
            f"gabor_conv channel mismatch: input {x.shape[0]}, layer expects {layer.c_in}")
    kernels = synthesize_kernels(layer)
    return T.conv2d(x, kernels, stride=1, padding=layer.kernel_size // 2)
