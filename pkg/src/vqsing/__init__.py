"""vqsing: score-free singing synthesis on discrete mel-spectrogram codes."""

__version__ = "0.1.0"
