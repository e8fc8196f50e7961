"""Desk-scale ambient-assisted-living stack over MQTT 3.1.1."""

__version__ = "0.1.0"
