"""Numerical core: autodiff, encoder, adapters, detector, training, metrics, data."""
