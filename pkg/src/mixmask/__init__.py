"""Actor-critic with latent-feature mix/mask mechanisms on cart-pole tasks."""

__version__ = "0.1.0"
