"""Surfel-based LiDAR-inertial-visual SLAM with a Gaussian splat map."""

__version__ = "0.1.0"
