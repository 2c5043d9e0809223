"""Host an arbitrary detector callable behind the LiDAR-attribution wire
protocol so real models can be analyzed by the engine."""

__version__ = "0.1.0"

from .server import BridgeConfig, serve, serve_streams

__all__ = ["BridgeConfig", "serve", "serve_streams", "__version__"]
