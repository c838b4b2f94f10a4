"""Physics-guided masked autoencoder for hyperspectral cubes, built on a small numpy autodiff core."""

__version__ = "0.1.0"
