"""RAW-to-RAW toolkit: packed-RAW containers, sensor noise profiles, global calibration, metrics and aligned patch pairs."""

__version__ = "0.1.0"
