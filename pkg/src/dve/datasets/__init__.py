from .faces import (
    AnnotatedImage,
    FaceBundle,
    FaceDataset,
    exclude_overlap,
    load_face_dataset,
    resize_size_for,
)
from .syntharm import (
    ArmBundle,
    ArmDataset,
    ArmSceneSpec,
    generate_arm_dataset,
    load_arm_dataset,
    save_arm_dataset,
)

__all__ = [
    "AnnotatedImage",
    "FaceBundle",
    "FaceDataset",
    "exclude_overlap",
    "load_face_dataset",
    "resize_size_for",
    "ArmBundle",
    "ArmDataset",
    "ArmSceneSpec",
    "generate_arm_dataset",
    "load_arm_dataset",
    "save_arm_dataset",
]
