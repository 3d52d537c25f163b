"""Style-robust novelty detection with teacher-student distillation and saliency-guided auxiliary OOD."""

__version__ = "0.1.0"
