"""gWaveNet: checkerboard-kernel CNN for gravity-wave patch classification."""

__version__ = "0.1.0"
