"""Toolkit for paired low-energy/subtracted mammography image pipelines.

Covers pair ingestion, mutual-information translation registration,
non-local means denoising, crop/split/augmentation dataset construction,
adversarial translation loss math, a desk-scale trainable LE-to-DES
translator with verified gradients, and accuracy/F1 evaluation over
repeated runs.
"""

__version__ = "0.1.0"
