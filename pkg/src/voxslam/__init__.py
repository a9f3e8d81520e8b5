"""voxslam: variational state-space SLAM with a generative occupancy-grid world model."""

__version__ = "0.1.0"
