"""motionforge: desk-scale procedural motion-policy pipeline."""

__version__ = "0.1.0"
