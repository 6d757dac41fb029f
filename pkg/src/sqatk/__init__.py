"""Non-intrusive speech quality assessment toolkit."""

from .quality import TASKS, QualityScores

__version__ = "0.1.0"
__all__ = ["TASKS", "QualityScores", "__version__"]
