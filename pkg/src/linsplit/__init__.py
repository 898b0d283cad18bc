"""Linear/non-linear feature disentanglement with learnable channel masks."""

__version__ = "0.1.0"
