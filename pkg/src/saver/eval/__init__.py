"""Datasets, metrics, the injection corpus and end-to-end runs."""
