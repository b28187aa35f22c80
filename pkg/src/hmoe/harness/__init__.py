"""Training, evaluation, load analytics, FLOPs accounting and gradient checks."""
