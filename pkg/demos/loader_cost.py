"""
Fewer loads per batch with several crops per image
==================================================

Taking m crops from each image inside one batch means only B/m images and
B/m label files have to be read.
"""

import time

from fkd.cli import bench_counts
from fkd.pipeline import CropSamplerConfig, generate_store, loader_cost_model
from fkd.quantize import marginal_smooth_mode
from fkd.teacher import TeacherSpec
from fkd.world import WorldSpec

world = WorldSpec(seed=2, num_images=256, image_size=32, num_classes=10)
teacher = TeacherSpec(seed=2, num_classes=10, resolution=16)
store = generate_store(world, teacher, 32, CropSamplerConfig(resolution=16),
                       marginal_smooth_mode(5), 2)

print(" m  images  files  model  ms/batch")
for row in bench_counts(store, 256, (1, 2, 4, 8, 16, 32)):
    model = loader_cost_model("fkd", 256, row["m"])
    print(f"{row['m']:2d}  {row['images_loaded']:6d}  {row['label_files_loaded']:5d}  "
          f"{model.images_loaded:5d}  {row['seconds'] * 1e3:8.1f}")

# For comparison, a label-map baseline reads one map per sample
print("relabel per batch:", loader_cost_model("relabel", 256).images_loaded)
