"""slenderfit: sub-pixel centerline refinement for slender, overlapping
bodies by reconstructing the image through a differentiable renderer."""

__version__ = "0.1.0"

from .geometry import KnotChain  # noqa: F401
