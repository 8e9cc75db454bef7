"""Prompt inversion toolkit for latent diffusion models.

Pipeline: caption-based initialization, gradient refinement of the
post-encoder text embedding against an image reconstruction loss, and
embedding-to-text decoding via a zero-step generator, an iterative
corrector and distance-guided beam search.
"""

__version__ = "0.1.0"
