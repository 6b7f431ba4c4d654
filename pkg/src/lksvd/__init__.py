"""K-SVD and learned K-SVD image denoising."""

__version__ = "0.1.0"
