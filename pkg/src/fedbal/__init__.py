"""Simulator for loss-aware sample selection and adaptive deadlines in federated learning."""

__version__ = "0.1.0"
