"""Datasets, experiment runs and the command line interface."""
