"""Disparity map container shared by the volume, refinement and data code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor


@dataclass
class DisparityMap:
    """Per-pixel horizontal offset in pixels with a validity mask."""

    values: Tensor
    valid: np.ndarray = None

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim != 2:
            raise ValueError("disparity values must be (H, W)")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValueError("valid mask must match the disparity shape")

    @property
    def shape(self):
        return self.values.shape
