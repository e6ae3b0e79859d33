"""Zero-shot cross-lingual opinion target extraction.

A convolutional IOB tagger runs over frozen word embeddings that were
mapped into a shared space with an orthogonal (Procrustes) projection, so a
model trained on one language can tag another. Scoring is exact-span F1.
"""

__version__ = "0.1.0"
