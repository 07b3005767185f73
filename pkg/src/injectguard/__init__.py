"""Injection-attack detection at the physical layer, end to end.

Secret-key energy signalling over a simulated fading channel, scatter
images of key-decoded receptions, a small CNN telling legitimate frames
from adversarial ones, and federated averaging of per-station models
over a framed, CRC-checked, optionally rate-throttled transport.
"""

from . import cnn, config, dataset, federation, metrics, signal_model
from .errors import InjectGuardError

__version__ = "0.1.0"

__all__ = [
    "cnn",
    "config",
    "dataset",
    "federation",
    "metrics",
    "signal_model",
    "InjectGuardError",
    "__version__",
]
