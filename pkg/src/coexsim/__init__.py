"""LTE / Wi-Fi coexistence and interference-mitigation simulator."""

__version__ = "0.1.0"
