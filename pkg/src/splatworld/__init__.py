"""splatworld: object-centric layered Gaussian splatting engine."""

__version__ = "0.1.0"
