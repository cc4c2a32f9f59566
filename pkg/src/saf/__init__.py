"""Emulated network-attached FPGA shell, switch fabric, remote host and models."""

__version__ = "0.1.0"
