"""Post-hoc distribution shift detection for 2D trajectories.

Trains a mixture-density decoder to forecast the second half of an observed
trajectory from the first half on top of a frozen encoder, then scores test
samples by the L2 norm of the forecasting-loss gradient at the decoder's
last-layer input.
"""

__version__ = "0.1.0"
