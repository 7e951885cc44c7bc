"""Hand-face interaction recovery with contact and deformation estimation."""
from handface import autodiff  # noqa: F401  (sets float64 defaults)

__version__ = "0.1.0"
