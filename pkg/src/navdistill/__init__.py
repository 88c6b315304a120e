"""Teacher-student cross-modal distillation for 2-D robot navigation."""

__version__ = "0.1.0"
