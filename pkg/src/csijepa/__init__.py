"""CSI-JEPA: self-supervised predictive pretraining for Wi-Fi CSI windows."""

__version__ = "0.1.0"
