"""Global label map + RoI align + softmax, the ReLabel-style baseline.

A label map is an S x S grid of teacher logits. Cell ``(i, j)`` holds the
teacher's logits on the window ``[j/S, (j+1)/S) x [i/S, (i+1)/S)`` of the
image, resized to the teacher's input resolution. Crop labels are then read
off the map by RoI align instead of running the teacher on the crop.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import label_store as ls
from .core import bilinear_sample, softmax
from .pipeline import apply_crop
from .teacher import build_teacher


@dataclass(frozen=True, eq=False)
class LabelMap:
    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 3 or grid.shape[0] != grid.shape[1] or grid.shape[0] < 1:
            raise ValueError(f"label map must be S x S x C, got {grid.shape}")
        if not np.all(np.isfinite(grid)):
            raise ValueError("label map contains non-finite scores")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def size(self):
        return self.grid.shape[0]

    @property
    def num_classes(self):
        return self.grid.shape[2]

    def save(self, path):
        Path(path).write_bytes(ls.encode_label_map(self.grid))

    @classmethod
    def load(cls, path):
        return cls(ls.decode_label_map(Path(path).read_bytes()))


def cell_box(i, j, size):
    return ls.CropBox(j / size, i / size, 1 / size, 1 / size)


def build_label_map(teacher_spec, image, size):
    if size < 1:
        raise ValueError("label map size must be >= 1")
    teacher = build_teacher(teacher_spec)
    r = teacher_spec.resolution
    regions = [apply_crop(image, ls.AugRecord(cell_box(i, j, size), False), r)
               for i in range(size) for j in range(size)]
    logits = teacher.logits(np.stack(regions))
    return LabelMap(logits.reshape(size, size, teacher_spec.num_classes))


def roi_align(label_map, box, sampling_ratio=2):
    """Pool one output bin over ``box`` from the label map.

    The bin is sampled on a regular ``sampling_ratio x sampling_ratio`` grid
    of bilinear samples, which are averaged.
    """
    if not (box.w > 0 and box.h > 0):
        raise ValueError("degenerate RoI box")
    s = label_map.size
    t = (np.arange(sampling_ratio) + 0.5) / sampling_ratio
    xs = (box.x + t * box.w) * s
    ys = (box.y + t * box.h) * s
    samples = bilinear_sample(label_map.grid, xs[None, :], ys[:, None])
    return samples.reshape(-1, label_map.num_classes).mean(axis=0)


def relabel_soft_label(label_map, box, sampling_ratio=2):
    return softmax(roi_align(label_map, box, sampling_ratio))
