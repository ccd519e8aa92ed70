"""Quality-aware unsupervised domain adaptation for no-reference point cloud
quality assessment: style mixup guided by quality labels, rank-weighted
conditional kernel alignment, and a multi-view projection front end."""

__version__ = "0.1.0"
