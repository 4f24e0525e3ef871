"""Flow-matching generative models conditioned on collective-variable level-sets."""

__version__ = "0.1.0"
