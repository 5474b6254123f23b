"""HDR imaging from multi-exposure LDR stacks with an overlapped-codebook prior."""

__version__ = "0.1.0"
