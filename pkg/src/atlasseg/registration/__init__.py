"""Pairwise MI-driven registration (rigid, affine, affine + B-spline)."""

from .mi import mutual_information
from .register import (
    MODES,
    RegistrationResult,
    RegistrationSettings,
    center_of_mass,
    register,
    run_registration,
    select_reference,
)
from .transforms import (
    AffineTransform,
    BSplineTransform,
    IdentityTransform,
    RigidTransform,
    Transform,
    load_transform,
    transform_from_dict,
)

__all__ = [
    "MODES",
    "AffineTransform",
    "BSplineTransform",
    "IdentityTransform",
    "RegistrationResult",
    "RegistrationSettings",
    "RigidTransform",
    "Transform",
    "center_of_mass",
    "load_transform",
    "mutual_information",
    "register",
    "run_registration",
    "select_reference",
    "transform_from_dict",
]
