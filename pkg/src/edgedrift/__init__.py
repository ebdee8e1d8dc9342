"""Edge detection under spatially misaligned boundary labels.

The package models label corruption as a smooth per-pixel displacement
field, learns that field jointly with a small convolutional edge detector,
and evaluates with correspondence-based boundary metrics (ODS-F / OIS-F /
mAP).  Heavy inner loops run in a compiled extension with a pure-numpy
fallback (see edgedrift._kernels.BACKEND).
"""

from edgedrift._kernels import BACKEND
from edgedrift.errors import ContractViolation

__version__ = "0.1.0"

__all__ = ["BACKEND", "ContractViolation", "__version__"]
