"""Crop sampling, region materialization, label generation and batch assembly.

Crop sampler RNG consumption, per call, in order:

* each attempt draws two uniforms (area fraction, log aspect ratio); an
  accepted attempt draws two more (x position, y position)
* after ``attempts`` rejections no further draws are made and the largest
  centered crop within the aspect range is used
* one final uniform decides the horizontal flip

Boxes are rounded to float32 at sampling time, so a box read back from a
label file is bit-identical to the one used to generate its label.
"""

import logging
import math
import os
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import label_store as ls
from .core import bilinear_sample
from .quantize import Kind, compress, harden, recover
from .teacher import LabelMode, build_teacher
from .world import image_id, make_image

log = logging.getLogger(__name__)

WORKERS_ENV = "FKD_MAX_WORKERS"


@dataclass(frozen=True)
class CropSamplerConfig:
    scale: tuple = (0.08, 1.0)
    ratio: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    attempts: int = 10
    resolution: int = 16

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))
        object.__setattr__(self, "ratio", tuple(float(v) for v in self.ratio))
        lo, hi = self.scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi <= 1, got {self.scale}")
        lo, hi = self.ratio
        if not 0 < lo <= hi:
            raise ValueError(f"aspect range must satisfy 0 < lo <= hi, got {self.ratio}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip probability must lie in [0, 1]")
        if self.attempts < 0 or self.resolution < 1:
            raise ValueError("attempts must be >= 0 and resolution >= 1")


def _f32(v):
    return float(np.float32(v))


def _make_box(x, y, w, h):
    w, h = _f32(w), _f32(h)
    # keep x + w <= 1 after rounding
    x = min(_f32(x), _f32(1.0 - w)) if x > 0 else 0.0
    y = min(_f32(y), _f32(1.0 - h)) if y > 0 else 0.0
    return ls.CropBox(max(x, 0.0), max(y, 0.0), w, h)


def sample_crop_params(cfg, rng, image_shape=(1, 1)):
    """Draw one random-resized-crop box and flip flag.

    ``image_shape`` is ``(H, W)``; area and aspect ratio are measured in
    pixels, the returned box is normalized.
    """
    height, width = image_shape[:2]
    area = float(height * width)
    log_lo, log_hi = math.log(cfg.ratio[0]), math.log(cfg.ratio[1])
    box = None
    for _ in range(cfg.attempts):
        target = area * (cfg.scale[0] + (cfg.scale[1] - cfg.scale[0]) * rng.random())
        aspect = math.exp(log_lo + (log_hi - log_lo) * rng.random())
        w = math.sqrt(target * aspect) / width
        h = math.sqrt(target / aspect) / height
        if 0 < w <= 1 and 0 < h <= 1:
            box = _make_box((1 - w) * rng.random(), (1 - h) * rng.random(), w, h)
            break
    if box is None:
        in_ratio = width / height
        if in_ratio < cfg.ratio[0]:
            w, h = 1.0, (width / cfg.ratio[0]) / height
        elif in_ratio > cfg.ratio[1]:
            w, h = (height * cfg.ratio[1]) / width, 1.0
        else:
            w, h = 1.0, 1.0
        box = _make_box((1 - w) / 2, (1 - h) / 2, w, h)
    flip = bool(rng.random() < cfg.flip_prob)
    return ls.AugRecord(box, flip)


def apply_crop(image, aug, resolution):
    """Cut ``aug.box`` out of ``image`` (H, W, ch), resize to r x r, maybe mirror."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"image must be H x W x ch, got {image.shape}")
    height, width = image.shape[:2]
    box = aug.box
    if box.x < 0 or box.y < 0 or box.x + box.w > 1 + ls.BOX_TOL or box.y + box.h > 1 + ls.BOX_TOL:
        raise ValueError(f"crop box {box} lies outside the image")
    t = (np.arange(resolution) + 0.5) / resolution
    xs = (box.x + t * box.w) * width
    ys = (box.y + t * box.h) * height
    region = bilinear_sample(image, xs[None, :], ys[:, None])
    if aug.flip:
        region = region[:, ::-1]
    return np.ascontiguousarray(region)


def aug_stream(cfg, seed, count, image_shape):
    """The first ``count`` crops of a per-image seeded crop stream."""
    rng = np.random.default_rng(seed)
    return [sample_crop_params(cfg, rng, image_shape) for _ in range(count)]


def image_seed(seed, index):
    return [int(seed), int(index)]


def label_crop(teacher, region, mode):
    """Teacher label for one region, compressed with ``mode``."""
    if teacher.spec.mode == LabelMode.SSL:
        if mode.kind != Kind.SSL_LOGITS:
            raise ValueError("SSL teachers store full logits only")
        return compress(teacher.logits(region), mode)
    if mode.kind == Kind.SSL_LOGITS:
        raise ValueError("SSL_LOGITS mode requires an SSL-mode teacher")
    if mode.kind == Kind.HARD:
        return harden(teacher.logits(region))
    return compress(teacher.soft_label(region), mode)


def generate_labels_for_image(image, teacher_spec, num_crops, cfg, mode, seed):
    """Sample ``num_crops`` crops of one image and label each with the teacher."""
    if num_crops < 1:
        raise ValueError("need at least one crop per image")
    teacher = build_teacher(teacher_spec)
    mode.validate_for(teacher_spec.num_classes)
    if cfg.resolution != teacher_spec.resolution:
        raise ValueError("crop resolution must match the teacher input resolution")
    augs = aug_stream(cfg, seed, num_crops, np.shape(image))
    records = []
    for aug in augs:
        region = apply_crop(image, aug, cfg.resolution)
        records.append(ls.CropRecord(aug, label_crop(teacher, region, mode)))
    return ls.LabelFile(mode, teacher_spec.num_classes, records)


def max_workers():
    cap = os.environ.get(WORKERS_ENV)
    n = os.cpu_count() or 1
    if cap:
        n = max(1, min(n, int(cap)))
    return n


# ------------------------------------------------------------------ stores

@dataclass
class LoaderCost:
    images_loaded: int = 0
    label_files_loaded: int = 0


def loader_cost_model(strategy, batch_size, crops_per_image=1):
    """Per-batch loads for ``fkd``, ``relabel`` or ``vanilla`` data loading."""
    if strategy == "fkd":
        if batch_size % crops_per_image:
            raise ValueError("batch size must be divisible by crops per image")
        n = batch_size // crops_per_image
        return LoaderCost(n, n)
    if strategy == "relabel":
        return LoaderCost(batch_size, batch_size)
    if strategy == "vanilla":
        return LoaderCost(batch_size, 0)
    raise ValueError(f"unknown loading strategy {strategy!r}")


class MemoryStore:
    """Images and label files held in memory; load calls are counted."""

    def __init__(self, images, label_files, num_classes):
        if len(images) != len(label_files):
            raise ValueError("one label file per image required")
        self.images = images
        self.label_files = label_files
        self.num_classes = num_classes
        self.images_loaded = 0
        self.label_files_loaded = 0

    def __len__(self):
        return len(self.images)

    def num_crops(self, index):
        return len(self.label_files[index].records)

    def load_image(self, index):
        self.images_loaded += 1
        return self.images[index]

    def load_labels(self, index):
        self.label_files_loaded += 1
        return self.label_files[index]


class DiskStore(MemoryStore):
    """Store rooted at a directory: ``images/*.npy``, ``labels/*.fkdl``, ``manifest.txt``."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"no label store manifest at {manifest}")
        self.entries = ls.read_manifest(manifest)
        if not self.entries:
            raise ls.LabelFormatError("empty manifest")
        first = ls.read_label_file(self.root / self.entries[0].path)
        self.num_classes = first.num_classes
        self.images_loaded = 0
        self.label_files_loaded = 0

    def __len__(self):
        return len(self.entries)

    def num_crops(self, index):
        return self.entries[index].num_crops

    def image_path(self, index):
        return self.root / "images" / f"{self.entries[index].image_id}.npy"

    def load_image(self, index):
        self.images_loaded += 1
        return np.load(self.image_path(index))

    def load_labels(self, index):
        self.label_files_loaded += 1
        return ls.read_label_file(self.root / self.entries[index].path)


def generate_store(world, teacher_spec, num_crops, cfg, mode, seed, root=None, workers=None):
    """Label every image of ``world``.

    Returns a :class:`MemoryStore`, or writes a :class:`DiskStore` layout
    under ``root`` and returns ``(store, bytes_written)``. Images are
    processed in parallel; output is merged in image order.
    """
    def one(index):
        img, _ = make_image(world, index)
        lf = generate_labels_for_image(img, teacher_spec, num_crops, cfg, mode,
                                       image_seed(seed, index))
        return img, lf

    workers = workers or max_workers()
    indices = range(world.num_images)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, indices))
    else:
        results = [one(i) for i in indices]

    if root is None:
        store = MemoryStore([r[0] for r in results], [r[1] for r in results],
                            teacher_spec.num_classes)
        store.resolution = cfg.resolution
        return store

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    written = 0
    for index, (img, lf) in enumerate(results):
        name = image_id(index)
        np.save(root / "images" / f"{name}.npy", img)
        rel = f"labels/{name}.fkdl"
        written += ls.write_label_file(root / rel, lf)
        entries.append(ls.ManifestEntry(name, rel, len(lf), mode))
    ls.write_manifest(root / "manifest.txt", entries)
    store = DiskStore(root)
    store.resolution = cfg.resolution
    return store, written


# ---------------------------------------------------------- batch assembly

@dataclass
class BatchPlan:
    batch_size: int
    crops_per_image: int
    image_ids: list
    pass_index: int = 0
    perm_seed: object = 0

    def __post_init__(self):
        b, m = self.batch_size, self.crops_per_image
        if m < 1 or b % m:
            raise ValueError(f"batch size {b} must be divisible by crops per image {m}")
        if len(self.image_ids) != b // m:
            raise ValueError(f"plan needs {b // m} images, got {len(self.image_ids)}")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("image ids within a plan must be distinct")


@dataclass
class Batch:
    regions: np.ndarray
    targets: np.ndarray
    image_ids: np.ndarray
    crop_ids: np.ndarray
    cost: LoaderCost = field(default_factory=LoaderCost)


def crop_window(pass_index, crops_per_image, num_crops):
    """Crop indices used in physical pass ``pass_index``: ``[k*m, k*m + m) mod M``."""
    start = pass_index * crops_per_image
    if start + crops_per_image > num_crops:
        log.info("crop cursor wrapped: pass %d wants crops %d..%d of %d", pass_index, start,
                 start + crops_per_image - 1, num_crops)
    return [(start + j) % num_crops for j in range(crops_per_image)]


def batch_permutation(plan):
    return np.random.default_rng(plan.perm_seed).permutation(plan.batch_size)


def assemble_batch(store, plan, resolution=None):
    """Materialize one FKD mini-batch from stored crop records.

    Each image and its label file are loaded once; its ``m`` crops for this
    pass are rebuilt from the stored boxes and their labels recovered. The
    batch is then shuffled by a seeded permutation.
    """
    regions, targets, ids, crops = [], [], [], []
    img0, lab0 = store.images_loaded, store.label_files_loaded
    for idx in plan.image_ids:
        image = store.load_image(idx)
        lf = store.load_labels(idx)
        r = resolution or _infer_resolution(store)
        for c in crop_window(plan.pass_index, plan.crops_per_image, len(lf.records)):
            rec = lf.records[c]
            regions.append(apply_crop(image, rec.aug, r))
            targets.append(recover(rec.label, lf.num_classes))
            ids.append(idx)
            crops.append(c)
    perm = batch_permutation(plan)
    cost = LoaderCost(store.images_loaded - img0, store.label_files_loaded - lab0)
    return Batch(np.stack(regions)[perm], np.stack(targets)[perm], np.asarray(ids)[perm],
                 np.asarray(crops)[perm], cost)


def _infer_resolution(store):
    res = getattr(store, "resolution", None)
    if res is None:
        raise ValueError("pass resolution= or set store.resolution")
    return res


def prefetch(iterable, depth=2):
    """Run ``iterable`` in a background thread through a bounded FIFO queue.

    Items arrive in production order; exceptions are re-raised in the
    consumer.
    """
    if depth < 1:
        yield from iterable
        return
    q = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for item in iterable:
                if stop.is_set():
                    return
                q.put((True, item))
            q.put((True, done))
        except BaseException as exc:  # forwarded to the consumer
            q.put((False, exc))

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            ok, item = q.get()
            if not ok:
                raise item
            if item is done:
                break
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(timeout=0.01)
