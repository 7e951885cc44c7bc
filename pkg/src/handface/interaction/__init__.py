from handface.interaction.geometry import (
    MeshDefectError,
    SurfaceIndex,
    check_closed,
    surface_distance_bruteforce,
    vertex_normals,
    winding_numbers,
)
from handface.interaction.losses import (
    PenetrationReport,
    chamfer_directed,
    chamfer_directed_bruteforce,
    collision_loss,
    contact_bce,
    deformation_loss,
    detect_penetration,
    touch_loss,
)

__all__ = [
    "MeshDefectError", "SurfaceIndex", "check_closed", "surface_distance_bruteforce",
    "vertex_normals", "winding_numbers", "PenetrationReport", "chamfer_directed",
    "chamfer_directed_bruteforce", "collision_loss", "contact_bce", "deformation_loss",
    "detect_penetration", "touch_loss",
]
