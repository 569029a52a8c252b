"""Desk-scale audio captioning with tagging/scene pretraining and transfer."""

__version__ = "0.1.0"
