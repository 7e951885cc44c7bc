from handface.data.dataset import DATASET_FORMAT, DatasetError, read_dataset, validate_sample, write_dataset
from handface.data.synth import (
    IMAGE_SIZE,
    Sample,
    SynthConfig,
    SynthesisError,
    contact_labels,
    gt_keypoint_depths,
    make_wild_sample,
    nominal_camera,
    prior_parameters,
    synth_dataset,
    synth_sample,
)
from handface.data.toymodels import make_face_model, make_hand_model, make_toy_models

__all__ = [
    "DATASET_FORMAT", "DatasetError", "read_dataset", "validate_sample", "write_dataset",
    "IMAGE_SIZE", "Sample", "SynthConfig", "SynthesisError", "contact_labels",
    "gt_keypoint_depths", "make_wild_sample", "nominal_camera", "prior_parameters", "synth_dataset", "synth_sample",
    "make_face_model", "make_hand_model", "make_toy_models",
]
