"""Neural-skinning subspace simulation toolkit."""

__version__ = "0.1.0"
