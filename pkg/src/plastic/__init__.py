"""Numpy-only toolkit for studying plasticity in deep learning: autodiff, layers,
sharpness-aware optimization, plasticity interventions, synthetic benchmarks and
small off-policy RL agents."""

__version__ = "0.1.0"
