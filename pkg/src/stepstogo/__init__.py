"""Two-stage post-training for goal-conditioned policies: supervised
fine-tuning on behavioral cloning plus steps-to-go prediction, then online
self-improvement with rewards read off the frozen steps-to-go predictor."""

__version__ = "0.1.0"
