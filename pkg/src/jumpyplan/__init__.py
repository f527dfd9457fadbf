"""Latent-skill learning from offline trajectories and zero-shot planning
with a K-step ("jumpy") dynamics model."""

__version__ = "0.1.0"
