"""Image sequence container shared by the generator, trainer and tools."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ImageSequence:
    """T+1 scalar frames on one grid: frame 0 is the moving image.

    ``frames`` is ``[T+1, H, W]`` float32; ``masks`` (optional) holds a
    parallel boolean stack, conventionally the analytic blood-pool mask
    per frame.
    """

    frames: np.ndarray
    spacing_mm: float = 1.5
    masks: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"ImageSequence: frames must be [T+1,H,W], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("ImageSequence: frames contain non-finite values")
        if self.spacing_mm <= 0:
            raise ValueError(f"ImageSequence: spacing must be positive, got {self.spacing_mm}")
        if self.masks is not None:
            self.masks = np.asarray(self.masks).astype(bool)
            if self.masks.shape != self.frames.shape:
                raise ValueError(f"ImageSequence: mask stack {self.masks.shape} does not "
                                 f"match frames {self.frames.shape}")

    @property
    def steps(self) -> int:
        """T: number of moving->fixed pairs."""
        return self.frames.shape[0] - 1

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def moving(self) -> np.ndarray:
        return self.frames[0]

    @property
    def fixed(self) -> np.ndarray:
        return self.frames[1:]
