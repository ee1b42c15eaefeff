"""
How much disk does a label store need?
======================================

Every stored crop costs its label payload plus five numbers describing the
crop (box and flip). At ImageNet scale the choice of label compression is
the difference between a terabyte and a few gigabytes.
"""

from fkd import label_store as ls
from fkd.cli import estimate_rows
from fkd.quantize import FULL, HARD, marginal_smooth_mode

# 1.2M images, 200 crops each, 1000 classes
for name, formula, size in estimate_rows(1_200_000, 200, 1000):
    print(f"{name:<22}{formula:>14}  {ls.format_bytes(size)}")

# Per-crop cost in values for a few modes
model = ls.StorageModel(1_200_000, 200, 1000)
for mode in (FULL, HARD, marginal_smooth_mode(5)):
    print(mode.name, ls.values_per_crop(model, mode), "values per crop")

# The on-disk record is a little tighter than the estimate, because the flip
# flag is one byte instead of four.
print("hard record on disk:", ls.record_size(HARD, 1000), "bytes")
