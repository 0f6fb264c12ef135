"""Teacher-student distillation of logits, inter-instance relations and channel relations."""

__version__ = "0.1.0"
