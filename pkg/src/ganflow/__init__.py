"""GAN-prior + normalizing-flow variational inference for Bayesian inverse problems."""

__version__ = "0.1.0"
