"""Desk-scale transformer pretraining and attention-distillation toolkit."""

__version__ = "0.1.0"
