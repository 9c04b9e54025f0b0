"""Synthetic data, losses, metrics, optimization, training loops, and file formats."""
