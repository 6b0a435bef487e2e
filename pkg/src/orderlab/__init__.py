"""Order-perturbation lab for cross-encoder re-ranking.

Synthetic corpora, BM25 first-stage retrieval, a miniature transformer
cross-encoder with switchable position information, order-destroying
input perturbations, TREC-style evaluation, and CKA representation
analysis.
"""

__version__ = "0.1.0"
