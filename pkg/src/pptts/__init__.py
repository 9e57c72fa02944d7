"""Desk-scale transfer-learning TTS.

Pre-train a flow-prior conditional VAE on unlabeled speech using pseudo
phonemes discovered by k-means over frame features, then fine-tune on a
small labeled corpus with a frozen / fine-tuned / from-scratch parameter
split.
"""

__version__ = "0.1.0"
