"""
Exception types shared by the library, the CLI and the API server.
"""

from __future__ import annotations


class FoveationError(Exception):
    """Base class for every error raised on purpose by this package."""


class ShapeMismatchError(FoveationError, ValueError):
    pass


class NonFiniteError(FoveationError, ValueError):
    pass


class ConfigError(FoveationError, ValueError):
    pass


class EpisodeFormatError(FoveationError, ValueError):
    pass


class DivergenceError(FoveationError, RuntimeError):
    def __init__(self, message: str, step: int = -1, recent_losses: list[float] | None = None):
        super().__init__(message)
        self.step = step
        self.recent_losses = list(recent_losses or [])

    def diagnostics(self) -> str:
        tail = ", ".join(f"{v:.4g}" for v in self.recent_losses[-5:])
        return f"{self} (step={self.step}, recent losses=[{tail}])"


class PolicyStallError(FoveationError, RuntimeError):
    """No buffered action chunk covers the requested control step."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_STALL = 5


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, EpisodeFormatError)):
        return EXIT_IO
    if isinstance(exc, (DivergenceError, NonFiniteError)):
        return EXIT_DIVERGENCE
    if isinstance(exc, PolicyStallError):
        return EXIT_STALL
    return 1
