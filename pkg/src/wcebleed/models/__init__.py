"""Classifier, detector and segmenter built on the autograd engine."""
