"""One-shot camera pose refinement against a gaussian-splat scene."""

__version__ = "0.1.0"
