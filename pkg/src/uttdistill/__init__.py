"""Desk-scale online-distillation pre-training for speech emotion representations."""

__version__ = "0.1.0"
