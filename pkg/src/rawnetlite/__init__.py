"""Raw-waveform audio deepfake detection toolkit."""

__version__ = "0.1.0"
