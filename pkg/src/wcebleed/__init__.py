"""Wireless-capsule-endoscopy bleeding pipeline: preprocess, classify, detect, segment, explain."""

__version__ = "0.1.0"
