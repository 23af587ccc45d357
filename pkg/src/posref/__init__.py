"""Semi-supervised referring lung segmentation with position-aware
augmentation and contrastive image-text alignment."""

__version__ = "0.1.0"
