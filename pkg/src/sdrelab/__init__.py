"""Sequential density-ratio estimation lab.

Temporal integrators (LSTM and sliding-window transformer) trained to
regress log-likelihood-ratio trajectories, a multiclass sequential
probability ratio test on top, and an analytic Gaussian oracle to verify
the whole stack at desk scale.
"""

__version__ = "0.1.0"
