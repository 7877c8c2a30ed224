"""Evidence-anchored 3D segmentation rewards, a reference propagator and a toy GRPO trainer."""

__version__ = "0.1.0"
