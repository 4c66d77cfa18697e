"""Emotion-preserving any-to-many voice conversion toolkit.

Subpackages cover the full desk-scale pipeline: manifest ingestion,
mel/F0 front-end, the adversarial conversion networks, the emotion-aware
losses, the two training loops (voice conversion and the two-stage
emotion embedder), the objective metric battery, and the embedding
leakage diagnostic.
"""

__version__ = "0.1.0"

EMOTION_CLASSES = ("happy", "sad", "anger", "neutral", "surprise")
