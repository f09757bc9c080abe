"""Rule-rewarded group policy optimization, preference mining and diffusion DPO on toy models."""

__version__ = "0.1.0"
