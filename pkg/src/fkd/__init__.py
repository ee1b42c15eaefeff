"""Fast knowledge distillation: stored region-level soft labels replayed through multi-crop training."""

from .core import bilinear_sample, cross_entropy, softmax
from .label_store import (AugRecord, CropBox, CropRecord, LabelFile, StorageModel, decode, encode,
                          estimate_fkd_storage, estimate_relabel_storage)
from .quantize import (CompressedLabel, Kind, QuantizationMode, compress, harden,
                       marginal_renorm, marginal_smooth, recover, smooth)
from .teacher import TeacherSpec, build_teacher, teacher_logits, teacher_soft_label

__version__ = "0.1.0"
