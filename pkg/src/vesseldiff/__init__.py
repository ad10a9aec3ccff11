"""Self-supervised vessel segmentation with a diffusion module, a switchable-SPADE
generator and two patch discriminators."""

from .evaluation import metrics
from .inference import segment
from .schedule import build_linear_schedule, perturb

__all__ = ["build_linear_schedule", "metrics", "perturb", "segment"]
__version__ = "0.1.0"
