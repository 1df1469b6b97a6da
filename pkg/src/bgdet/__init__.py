"""Background-adaptive two-stage detector, synthetic data generator, and
experiment harness, all at desk scale on CPU."""

__version__ = "0.1.0"
