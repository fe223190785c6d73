"""Layer separation for multispectral drawing scans.

White-reference normalization, spectral trimming and binning, PCA, and
K-means / Gaussian-mixture pixel clustering, plus a phantom generator and an
evaluation harness.
"""

__version__ = "0.1.0"
