"""Simulator for a ring-2, 32-bit privileged user layer on x86-64 segmentation and callgates."""

__version__ = "0.1.0"
