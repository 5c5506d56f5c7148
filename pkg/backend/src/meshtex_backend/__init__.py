"""Noise-predictor service speaking the GTNP wire protocol.

The service wraps a depth-conditioned denoiser plus autoencoder companions
and installs the style-consistency hooks (cross-view attention, 3D group
norm) when a request asks for them. All sampling state lives in the engine;
the service is stateless between requests.
"""

from .config import ServiceConfig
from .conformance import conformance_check
from .model import StandInPipeline

__all__ = ["ServiceConfig", "StandInPipeline", "conformance_check"]
