"""ECG beat synthesis with a self-supervised Wasserstein GAN."""

__version__ = "0.1.0"
