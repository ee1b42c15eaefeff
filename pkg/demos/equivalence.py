"""
Replaying stored labels is the same as running the teacher
==========================================================

Labels are generated once per crop and stored with the crop box. Training
then rebuilds each crop from the box and reads its label from disk. With
lossless storage the student sees exactly what on-the-fly distillation
would have shown it, down to the last bit of every parameter.
"""

import time

import numpy as np

from fkd.pipeline import CropSamplerConfig, generate_store
from fkd.quantize import FULL, HARD
from fkd.teacher import TeacherSpec
from fkd.train import TrainConfig, train_student, vanilla_kd_reference
from fkd.world import WorldSpec, make_images

world = WorldSpec(seed=1, num_images=200, image_size=32, num_classes=10)
teacher = TeacherSpec(seed=1, num_classes=10, resolution=16)
crop = CropSamplerConfig(resolution=16)
cfg = TrainConfig(batch_size=40, crops_per_image=4, passes=4, seed=1)

t0 = time.perf_counter()
store = generate_store(world, teacher, 16, crop, FULL, 1)
print(f"labelled {len(store)} images x 16 crops in {time.perf_counter() - t0:.2f} s")

fkd = train_student(store, cfg)
oracle = vanilla_kd_reference(make_images(world), teacher, cfg, crop, 1, 16)
print("same parameters:", fkd.theta.tobytes() == oracle.theta.tobytes())
print("largest per-step loss gap:", np.max(np.abs(np.subtract(fkd.losses, oracle.losses))))

# Throwing information away breaks the equality
hard = train_student(generate_store(world, teacher, 16, crop, HARD, 1), cfg)
print("hard labels, same parameters:", hard.theta.tobytes() == oracle.theta.tobytes())

for row in fkd.metrics[::4]:
    print(f"epoch {row['epoch']:2d}  lr {row['lr']:.4f}  loss {row['loss']:.4f}  "
          f"acc {row['accuracy']:.3f}")
