import logging
import math
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial import cKDTree

from image_io import check_field, pixel_grid

logger = logging.getLogger(__name__)


class WarpError(Exception):
    pass


class WarpParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_warp: float = Field(0.5, gt=0)
    cutoff_radius: float = Field(2.0, gt=0)
    fallback: Literal["nearest-source", "reference-intensity"] = "reference-intensity"

    @model_validator(mode="after")
    def _cutoff_covers_kernel(self):
        if self.cutoff_radius < self.sigma_warp:
            raise ValueError(f"cutoff_radius ({self.cutoff_radius}) must be >= sigma_warp ({self.sigma_warp})")
        return self


def warp_image(reference: np.ndarray, field: np.ndarray, params: WarpParams = WarpParams()) -> np.ndarray:
    """Push every pixel of `reference` to x + u(x) and resample with a Gaussian kernel.

    Each output pixel is the Nadaraya-Watson mean of the intensities that land
    within cutoff_radius of it.
    """
    reference = np.asarray(reference, dtype=np.float64)
    field = check_field(field, reference.shape, error=WarpError)
    height, width = reference.shape
    rows, cols = pixel_grid(reference.shape)

    dest_r = (rows + field[..., 1]).ravel()
    dest_c = (cols + field[..., 0]).ravel()
    intensity = reference.ravel()
    base_r = np.floor(dest_r).astype(np.int64)
    base_c = np.floor(dest_c).astype(np.int64)

    weighted = np.zeros(height * width)
    weight_sum = np.zeros(height * width)
    reach = int(math.ceil(params.cutoff_radius))
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            tr = base_r + dr
            tc = base_c + dc
            dist2 = (tr - dest_r) ** 2 + (tc - dest_c) ** 2
            keep = (dist2 <= params.cutoff_radius ** 2) & (tr >= 0) & (tr < height) & (tc >= 0) & (tc < width)
            if not keep.any():
                continue
            target = tr[keep] * width + tc[keep]
            w = np.exp(-dist2[keep] / (2.0 * params.sigma_warp ** 2))
            # bincount sums in index order, so accumulation is deterministic
            weighted += np.bincount(target, weights=w * intensity[keep], minlength=height * width)
            weight_sum += np.bincount(target, weights=w, minlength=height * width)

    output = reference.ravel().copy()
    covered = weight_sum > 0
    output[covered] = weighted[covered] / weight_sum[covered]

    holes = np.flatnonzero(~covered)
    if holes.size:
        logger.debug("%d of %d pixels received no scattered intensity", holes.size, output.size)
        if params.fallback == "nearest-source":
            tree = cKDTree(np.column_stack([dest_r, dest_c]))
            _, nearest = tree.query(np.column_stack([holes // width, holes % width]).astype(np.float64))
            output[holes] = intensity[nearest]
    return np.clip(output.reshape(height, width), 0.0, 255.0)
