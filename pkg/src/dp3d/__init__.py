"""Learning articulated 3D template models from 2D keypoints.

Row-vector convention throughout: a rigid transform ``(R, T)`` maps a point
``p`` to ``p @ R + T``.
"""

from .mesh import SpectralBasis, TriMesh, load_mesh, spectral_basis
from .model import DP3D, ModelConfig
from .rigid import RigidTransform, se3_exp, se3_log

__version__ = "0.1.0"

__all__ = ["DP3D", "ModelConfig", "RigidTransform", "SpectralBasis", "TriMesh", "load_mesh", "se3_exp",
           "se3_log", "spectral_basis"]
