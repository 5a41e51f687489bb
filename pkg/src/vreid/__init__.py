"""Vehicle re-identification toolkit: multi-source label merging, two-stage
head training, cosine retrieval, post-processing and retrieval metrics."""

__version__ = "0.1.0"
