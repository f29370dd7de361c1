"""Dual-track streaming dialogue: early connectives from a small model, main content from a large one."""

from __future__ import annotations

__version__ = "0.1.0"
