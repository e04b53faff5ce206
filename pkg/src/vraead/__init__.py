"""Variational recurrent autoencoder with variational self-attention for
unsupervised anomaly detection in multivariate smart-meter time series."""

__version__ = "0.1.0"
