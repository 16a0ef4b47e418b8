"""Spiking-network decision-feedback equalizer testbed for an IM/DD optical link."""

__version__ = "0.1.0"
