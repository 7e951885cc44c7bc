from handface.meshcore.model import (
    AssetError,
    ParametricModel,
    PoseState,
    apply_deformation,
    lbs_forward,
    regress_keypoints,
    resample_mesh,
)
from handface.meshcore.procrustes import DegenerateError, procrustes_align, similarity_transform
from handface.meshcore.fitting import FitError, FitResult, fit_parameters_lm

__all__ = [
    "AssetError", "ParametricModel", "PoseState", "apply_deformation", "lbs_forward",
    "regress_keypoints", "resample_mesh", "DegenerateError", "procrustes_align",
    "similarity_transform", "FitError", "FitResult", "fit_parameters_lm",
]
