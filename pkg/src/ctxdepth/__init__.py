"""Self-supervised monocular depth estimation with contextual feature fusion."""

__version__ = "0.1.0"
