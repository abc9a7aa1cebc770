"""Class-imbalanced cross-domain OOD detection with adaptive entropy
thresholds and uncertainty-aware clustering, on feature vectors."""

__version__ = "0.1.0"
