"""Datasets, training, metrics, ensembles and analysis around the model."""
