"""Back-transcription toolkit for measuring NLU robustness to speech recognition errors."""

__version__ = "0.1.0"

from .main import main  # noqa: E402

__all__ = ["main", "__version__"]
