"""Expert-pruning lab for a toy mixture-of-experts translator."""

__version__ = "0.1.0"
