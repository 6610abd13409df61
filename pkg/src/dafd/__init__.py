"""Domain-adaptive fall detection from wearable accelerometer trials."""

__version__ = "0.1.0"
