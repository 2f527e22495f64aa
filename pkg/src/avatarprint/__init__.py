"""Avatar fingerprinting: verify the human driver behind synthetic
talking-head videos from facial-motion dynamics.

Subpackages cover the video catalog, per-frame feature storage, the
temporal-attention embedding model and its training loop, windowed pair
scoring, the verification protocol (splits and trial lists), evaluation
metrics and reports, and a synthetic benchmark corpus for end-to-end
validation.
"""

__version__ = "0.1.0"
