"""Intensity preprocessing: N4 bias-field correction followed by anisotropic diffusion."""

from __future__ import annotations

import numpy as np

from ..volume import Volume
from .diffusion import DiffusionSettings, anisotropic_diffusion
from .n4 import N4Result, N4Settings, fit_bias_field, n4_correct

__all__ = [
    "DiffusionSettings",
    "N4Result",
    "N4Settings",
    "anisotropic_diffusion",
    "fit_bias_field",
    "n4_correct",
    "preprocess_volume",
]


def preprocess_volume(
    volume: Volume,
    n4: N4Settings | None = None,
    diffusion: DiffusionSettings | None = None,
    skip_n4: bool = False,
    skip_diffusion: bool = False,
    mask=None,
) -> tuple[Volume, Volume | None]:
    """Run N4 then diffusion. Returns the processed volume and the bias field (or None).

    Both steps work inside ``mask`` (default: voxels with intensity > 0), so
    the zero background of skull-stripped data stays exactly zero.
    """
    if mask is None:
        mask = volume.data > 0
    else:
        mask = np.asarray(getattr(mask, "data", mask)) != 0
    field = None
    out = volume
    if not skip_n4:
        out, field = n4_correct(out, mask, n4)
    if not skip_diffusion:
        out = anisotropic_diffusion(out, diffusion, mask)
    return out, field
