"""Active-view visual anomaly detection on a synthetic inspection bench."""

__version__ = "0.1.0"
