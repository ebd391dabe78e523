"""Desk-scale differentiable camera-LiDAR query fusion, tracking and forecasting."""

__version__ = "0.1.0"
