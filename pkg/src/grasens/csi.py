"""CSI trace modelling: channel model, synthetic generation, sliding-window
segmentation, tensor layout, and the GCSI on-disk format.

Tensor layout puts antenna pairs on the channel axis, subcarriers on the
height (frequency) axis and packets on the width (time) axis, so the
temporal and frequency attention maps downstream act on meaningful axes.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, ParseError

GCSI_MAGIC = b"GCSI"
GCSI_VERSION = 1
# magic(4) version(u16) n_tx(u16) n_rx(u16) n_sub(u16) rate(u32) label(i32) count(u64)
_HEADER = struct.Struct("<4sHHHHIiQ")


@dataclass(frozen=True)
class CsiGeometry:
    n_tx: int
    n_rx: int
    n_sub: int
    sample_rate_hz: int = 100

    def __post_init__(self):
        for name in ("n_tx", "n_rx", "n_sub", "sample_rate_hz"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"CsiGeometry.{name} must be strictly positive")

    @property
    def channels(self):
        return self.n_tx * self.n_rx


@dataclass
class CsiTrace:
    geometry: CsiGeometry
    packets: np.ndarray  # complex128, shape (I, n_tx, n_rx, n_sub)
    label: int | None = None

    def __post_init__(self):
        g = self.geometry
        expected = (g.n_tx, g.n_rx, g.n_sub)
        if self.packets.ndim != 4 or self.packets.shape[1:] != expected:
            raise ConfigurationError(
                f"packets shape {self.packets.shape} does not match geometry {expected}")
        if self.packets.shape[0] < 1:
            raise ConfigurationError("a trace needs at least one packet")

    @property
    def n_packets(self):
        return self.packets.shape[0]


@dataclass(frozen=True)
class SegmentSpec:
    phi: int      # window length in packets
    upsilon: int  # hop in packets

    def __post_init__(self):
        if not 1 <= self.upsilon <= self.phi:
            raise ConfigurationError(
                f"SegmentSpec requires 1 <= upsilon <= phi, got upsilon={self.upsilon}, phi={self.phi}")


@dataclass
class CsiTensor:
    data: np.ndarray  # float64, (C, H, W) = (n_tx*n_rx, n_sub, phi)
    source_trace: str = ""
    label: int | None = None


def channel_model(tx, csi, noise_sigma, rng=None):
    """Received packet B = csi @ tx plus i.i.d. complex Gaussian noise with the
    given std per real component. noise_sigma = 0 is exact."""
    tx = np.asarray(tx, dtype=np.complex128)
    csi = np.asarray(csi, dtype=np.complex128)
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be non-negative")
    if csi.ndim != 2 or csi.shape[1] != tx.shape[0]:
        raise ConfigurationError(f"channel_model dimension mismatch: csi {csi.shape}, tx {tx.shape}")
    out = csi @ tx
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng()
        noise = rng.normal(scale=noise_sigma, size=out.shape) \
            + 1j * rng.normal(scale=noise_sigma, size=out.shape)
        out = out + noise
    return out


# Synthetic class signatures: each class gets a distinct chirp in the
# time-frequency plane confined to its own subcarrier band.
_SYNTH_BASE_FREQ = 0.01
_SYNTH_CHIRP_RATE = 5e-5
_SYNTH_DEPTH = 0.8
_SYNTH_NOISE = 0.05


def generate_synthetic(geometry, class_id, duration_packets, seed, n_classes=4):
    """Deterministic synthetic trace for one action class.

    Class c modulates the subcarrier magnitudes inside band c with a chirp of
    class-specific rate, pushed through the channel model with light noise.
    """
    if not 0 <= class_id < n_classes:
        raise ConfigurationError(f"class_id {class_id} out of range for {n_classes} classes")
    rng = np.random.default_rng((seed, class_id, duration_packets))
    g = geometry
    I = duration_packets
    t = np.arange(I)

    f0 = _SYNTH_BASE_FREQ * (1 + class_id)
    chirp = _SYNTH_CHIRP_RATE * (1 + class_id)
    band_lo = int(class_id * g.n_sub / n_classes)
    band_hi = max(band_lo + 1, int((class_id + 1) * g.n_sub / n_classes))
    mask = np.zeros(g.n_sub)
    mask[band_lo:band_hi] = 1.0

    base = 1.0 + 0.1 * rng.normal(size=(g.n_tx, g.n_rx, g.n_sub))
    wave = np.cos(2 * np.pi * (f0 * t + 0.5 * chirp * t * t))  # (I,)
    mod = 1.0 + _SYNTH_DEPTH * wave[:, None] * mask[None, :]   # (I, n_sub)

    # One unit pilot per tx antenna estimates gain[j, :] plus noise; the
    # stored packet is that per-pair CSI estimate.
    packets = np.empty((I, g.n_tx, g.n_rx, g.n_sub), dtype=np.complex128)
    pilots = np.eye(g.n_tx, dtype=np.complex128)
    for i in range(I):
        for s in range(g.n_sub):
            gain = base[:, :, s] * mod[i, s]  # (n_tx, n_rx)
            for j in range(g.n_tx):
                packets[i, j, :, s] = channel_model(pilots[j], gain.T, _SYNTH_NOISE, rng)
    return CsiTrace(geometry=g, packets=packets, label=class_id)


def layout_tensor(window, source_trace="", label=None):
    """(phi, n_tx, n_rx, n_sub) complex window -> (C, H, W) magnitude tensor
    with C enumerating (tx, rx) pairs row-major."""
    window = np.asarray(window)
    phi, n_tx, n_rx, n_sub = window.shape
    # (phi, tx, rx, sub) -> (tx, rx, sub, phi) -> (tx*rx, sub, phi)
    mag = np.abs(window).transpose(1, 2, 3, 0).reshape(n_tx * n_rx, n_sub, phi)
    return CsiTensor(data=np.ascontiguousarray(mag), source_trace=source_trace, label=label)


def segment(trace, spec):
    """Sliding windows at starts 0, upsilon, 2*upsilon, ... while start+phi <= I."""
    I = trace.n_packets
    if I < spec.phi:
        raise DataError(
            f"trace has {I} packets, shorter than window phi={spec.phi}: no segments")
    out = []
    start = 0
    idx = 0
    while start + spec.phi <= I:
        window = trace.packets[start:start + spec.phi]
        out.append(layout_tensor(window, source_trace=f"seg{idx}@{start}", label=trace.label))
        start += spec.upsilon
        idx += 1
    return out


# -- GCSI binary format ----------------------------------------------------

def write_trace(trace, path):
    g = trace.geometry
    label = -1 if trace.label is None else int(trace.label)
    header = _HEADER.pack(GCSI_MAGIC, GCSI_VERSION, g.n_tx, g.n_rx, g.n_sub,
                          g.sample_rate_hz, label, trace.n_packets)
    # packet-major, then tx, rx, subcarrier; each value f32 real, f32 imag
    interleaved = np.empty(trace.packets.shape + (2,), dtype=np.float32)
    interleaved[..., 0] = trace.packets.real
    interleaved[..., 1] = trace.packets.imag
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(interleaved.tobytes())


def read_trace(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ParseError(f"file too short for GCSI header ({len(raw)} bytes)", offset=len(raw))
    magic, version, n_tx, n_rx, n_sub, rate, label, count = _HEADER.unpack_from(raw, 0)
    if magic != GCSI_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {GCSI_MAGIC!r}", offset=0)
    if version != GCSI_VERSION:
        raise ParseError(f"unsupported GCSI version {version}", offset=4)
    try:
        geometry = CsiGeometry(n_tx=n_tx, n_rx=n_rx, n_sub=n_sub, sample_rate_hz=rate)
    except ConfigurationError as exc:
        raise ParseError(f"invalid geometry in header: {exc}", offset=6) from exc
    values = count * n_tx * n_rx * n_sub
    expected = _HEADER.size + values * 8
    if len(raw) != expected:
        raise ParseError(
            f"payload for {count} packets needs {expected} bytes total, file has {len(raw)}",
            offset=min(len(raw), expected))
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    packets = (flat[0::2] + 1j * flat[1::2]).astype(np.complex128)
    packets = packets.reshape(count, n_tx, n_rx, n_sub)
    return CsiTrace(geometry=geometry, packets=packets,
                    label=None if label < 0 else label)


# -- manifest ---------------------------------------------------------------

def write_manifest(entries, path):
    """entries: iterable of {path, label, split} dicts."""
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                e = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"manifest line {lineno} is not valid JSON: {exc}") from exc
            for key in ("path", "label", "split"):
                if key not in e:
                    raise ParseError(f"manifest line {lineno} missing key {key!r}")
            entries.append(e)
    if not entries:
        raise DataError(f"manifest {path} is empty")
    return entries
