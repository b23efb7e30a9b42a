"""Biomechanical skeleton fitting: kinematics, marker IK, body meshes,
deformable attention, a temporal IK network, keypoint refinement and metrics."""

from .kinematics import forward_kinematics, fk_jacobian
from .skeleton import Pose, SkeletonModel, apply_scales, builtin_skeleton, load_skeleton

__all__ = ["Pose", "SkeletonModel", "apply_scales", "builtin_skeleton", "load_skeleton",
           "forward_kinematics", "fk_jacobian"]
__version__ = "0.1.0"
