"""GraSens-style WiFi CSI action recognition: CSI ingestion, Gabor residual
anti-aliasing blocks with fractal-dimension attention, and a deterministic
trainer, all on a minimal reverse-mode autodiff engine."""

from .csi import (CsiGeometry, CsiTensor, CsiTrace, SegmentSpec, channel_model,
                  generate_synthetic, layout_tensor, read_trace, segment, write_trace)
from .errors import (ConfigurationError, DataError, DivergenceError, GrasensError,
                     ParseError, UsageError)
from .tensor import Tensor

__all__ = [
    "CsiGeometry", "CsiTensor", "CsiTrace", "SegmentSpec", "Tensor",
    "channel_model", "generate_synthetic", "layout_tensor", "read_trace",
    "segment", "write_trace",
    "ConfigurationError", "DataError", "DivergenceError", "GrasensError",
    "ParseError", "UsageError",
]

__version__ = "0.1.0"
