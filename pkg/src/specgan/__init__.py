"""Class-conditional spectrogram GAN augmentation toolkit."""

__version__ = "0.1.0"
