"""Downstream activity recognition: synthetic data, backbones, training protocols."""
