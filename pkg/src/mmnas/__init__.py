"""Hardware-aware two-tier multimodal architecture search."""

__version__ = "0.1.0"
