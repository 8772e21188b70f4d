"""Adversary learning on IoT network trace logs.

Simulate ns-2 style traces with and without a hidden-channel adversary pair,
turn them into token sequence pairs, train a GRU encoder-decoder with additive
attention and flag collaborating nodes from the trained model's predictions.
"""

__version__ = "0.1.0"
