from mbdm.constraints.base import DistanceField, GradCheckReport, LinearField, NormalizedField, fd_grad_check
from mbdm.constraints.checkerboard import Checkerboard
from mbdm.constraints.polytope import BoxField, OrthonormalPolytope
from mbdm.constraints.scene import (
    AGENT_DIM,
    CollisionField,
    DrivableRegion,
    OffroadField,
    SceneGeometry,
    decode_agents,
    encode_agents,
)

__all__ = [
    "AGENT_DIM", "BoxField", "Checkerboard", "CollisionField", "DistanceField", "DrivableRegion",
    "GradCheckReport", "LinearField", "NormalizedField", "OffroadField", "OrthonormalPolytope",
    "SceneGeometry", "decode_agents", "encode_agents", "fd_grad_check",
]
