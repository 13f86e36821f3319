"""Forward-pass kernels and analysis tools for a unified convolution/attention
super-resolution network."""

__version__ = "0.1.0"
