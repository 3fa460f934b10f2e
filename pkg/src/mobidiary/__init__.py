"""Sensor-to-caption generation for wearable IMU and Wi-Fi CSI signals."""

__version__ = "0.1.0"
