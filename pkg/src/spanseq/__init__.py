"""Seller-behavior span sequences: aggregation, contrastive pre-training, evaluation."""

__version__ = "0.1.0"
