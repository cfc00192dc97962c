"""Short-horizon traffic forecasting on raster movies with U-Net and graph ensemble models."""

__version__ = "0.1.0"
