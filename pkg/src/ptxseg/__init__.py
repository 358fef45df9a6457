"""Pneumothorax segmentation toolkit: data handling, U-Net training and evaluation."""

__version__ = "0.1.0"
