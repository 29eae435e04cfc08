"""Desk-scale discrete diffusion training, distillation, and exact evaluation."""

__version__ = "0.1.0"
