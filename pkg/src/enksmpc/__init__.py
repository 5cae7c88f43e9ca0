"""MPC of matrix-valued nonlinear dynamics via matrix-variate ensemble smoothing."""

from enksmpc.matvar import (
    JointBlockParams,
    MatrixNormalParams,
    NoiseStreams,
    affine_transform,
    conditional,
    log_pdf,
    sample,
)

__all__ = [
    "JointBlockParams",
    "MatrixNormalParams",
    "NoiseStreams",
    "affine_transform",
    "conditional",
    "log_pdf",
    "sample",
]

__version__ = "0.1.0"
