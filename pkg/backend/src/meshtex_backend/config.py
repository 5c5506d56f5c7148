from __future__ import annotations

from dataclasses import dataclass


@dataclass
class ServiceConfig:
    """Service-level settings; model hyperparameters live with the model."""

    model_id: str = "standin-denoiser-v1"
    control_id: str = "standin-depth-control-v1"
    host: str = "127.0.0.1"
    port: int = 7447
    health_port: int = 7448
    max_batch: int = 8
    # Guidance without the prompt pass tends to produce unnatural colors, so
    # it stays off unless explicitly enabled.
    guess_mode: bool = False

    def validate(self) -> None:
        if self.max_batch < 4:
            raise ValueError("max_batch must be at least 4")
        if not (0 < self.port < 65536) or not (0 < self.health_port < 65536):
            raise ValueError("ports must be in (0, 65536)")
        if self.port == self.health_port:
            raise ValueError("wire and health ports must differ")
