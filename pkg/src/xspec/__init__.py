"""Unsupervised cross-spectral (RGB/IR) representation learning on precomputed
backbone feature maps.

The package trains a small cross-spectral attention model on top of frozen
CNN features without identity labels: intra-domain agglomerative clustering
proposes pseudo-identities, a cross-domain voting scheme associates RGB
clusters with IR clusters, and the resulting pseudo triplets drive a hinge
loss with an L1 sparsity penalty.  Everything is plain numpy with manual
analytic gradients.
"""

__version__ = "0.1.0"
