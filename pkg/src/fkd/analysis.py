"""Cross-entropy distances between label sources.

Direction convention: ``A -> B`` is ``-sum_c P_B(c) log P_A(c)``. The arrow's
target ``B`` supplies the weights, so ``ReLabel -> FKD`` is
``-P_FKD log P_ReLabel``. Per-class means group keys by the class assigned
by a designated one-hot source.
"""

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import cross_entropy, kl_divergence
from .label_store import AugRecord, CropBox
from .pipeline import CropSamplerConfig, apply_crop, aug_stream, image_seed
from .relabel import build_label_map, relabel_soft_label
from .teacher import TeacherKind, TeacherSpec, build_teacher
from .world import WorldSpec, make_image

CSV_FIELDS = ("pair", "direction", "class", "mean_ce", "n")
DEMO_SEED = 20211213


@dataclass
class LabelSource:
    name: str
    labels: dict

    def __post_init__(self):
        if "->" in self.name or "|" in self.name or "," in self.name:
            raise ValueError(f"source name {self.name!r} may not contain '->', '|' or ','")


@dataclass
class DistanceReport:
    classes: list
    counts: dict
    means: dict = field(default_factory=dict)   # (A, B) -> {class: mean}
    sources: list = field(default_factory=list)

    def mean(self, a, b):
        """Sample-weighted mean over all classes for direction ``a -> b``."""
        per = self.means[(a, b)]
        n = sum(self.counts[c] for c in self.classes)
        return sum(per[c] * self.counts[c] for c in self.classes) / n

    def __eq__(self, other):
        if not isinstance(other, DistanceReport):
            return NotImplemented
        return (self.classes == other.classes and self.counts == other.counts
                and self.means == other.means)


def one_hot_source(name, classes, num_classes):
    eye = np.eye(num_classes)
    return LabelSource(name, {k: eye[c] for k, c in classes.items()})


def ce_matrix(sources, keys=None, class_source=None):
    """Per-class mean cross-entropy for every ordered pair of sources.

    ``class_source`` names the one-hot source whose argmax assigns each key
    to a class (default: the first source).
    """
    if len(sources) < 2:
        raise ValueError("need at least two label sources")
    names = [s.name for s in sources]
    if len(set(names)) != len(names):
        raise ValueError("source names must be unique")
    if keys is None:
        keys = sorted(sources[0].labels)
    keys = list(keys)
    for s in sources:
        if set(s.labels) != set(keys):
            raise ValueError(f"source {s.name!r} is not defined on the shared key set")
    by_name = {s.name: s for s in sources}
    cls_src = by_name[class_source or names[0]]
    key_class = {k: int(np.argmax(cls_src.labels[k])) for k in keys}
    classes = sorted(set(key_class.values()))
    counts = {c: sum(1 for k in keys if key_class[k] == c) for c in classes}

    stacked = {s.name: np.stack([np.asarray(s.labels[k], dtype=np.float64) for k in keys])
               for s in sources}
    key_cls = np.array([key_class[k] for k in keys])
    report = DistanceReport(classes, counts, sources=names)
    for a in names:
        for b in names:
            ce = cross_entropy(stacked[b], stacked[a])
            report.means[(a, b)] = {c: float(np.sum(ce[key_cls == c]) / counts[c]) for c in classes}
    return report


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for (a, b), per in report.means.items():
        pair = "|".join(sorted((a, b)))
        for c in report.classes:
            w.writerow([pair, f"{a}->{b}", c, repr(per[c]), report.counts[c]])
    return buf.getvalue()


def emit_report(report, path):
    Path(path).write_text(report_csv(report))


def parse_report(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    classes, counts, means, sources = [], {}, {}, []
    for r in rows:
        a, b = r["direction"].split("->")
        c = int(r["class"])
        if c not in counts:
            classes.append(c)
            counts[c] = int(r["n"])
        for name in (a, b):
            if name not in sources:
                sources.append(name)
        means.setdefault((a, b), {})[c] = float(r["mean_ce"])
    return DistanceReport(sorted(classes), counts, means, sources)


def read_report(path):
    return parse_report(Path(path).read_text())


# ----------------------------------------------------------- demo scenario

@dataclass(frozen=True)
class MismatchScenario:
    seed: int = DEMO_SEED
    num_images: int = 100
    crops_per_image: int = 16
    image_size: int = 32
    num_classes: int = 10
    map_size: int = 15
    resolution: int = 16
    gain: float = 4.0


def _on_grid(box, size, tol=1e-6):
    edges = (box.x, box.y, box.x + box.w, box.y + box.h)
    return all(abs(v * size - round(v * size)) < tol for v in edges)


def run_mismatch_scenario(sc=MismatchScenario(), extra_sources=(),
                          include=("OneHot", "FKD", "ReLabel")):
    """Label every crop three ways (exact teacher, RoI-aligned map, image one-hot).

    Returns ``(report, stats)``. ``extra_sources`` are ``(name, fn)`` pairs
    with ``fn(regions) -> probs`` evaluated on the same crops, e.g. trained
    students. ``include`` picks which of the three built-in sources enter the
    report; the summary statistics need all three.
    """
    world = WorldSpec(sc.seed, sc.num_images, sc.image_size, 3, sc.num_classes)
    spec = TeacherSpec(TeacherKind.TABULAR, sc.seed, sc.num_classes,
                       resolution=sc.resolution, gain=sc.gain)
    teacher = build_teacher(spec)
    crop_cfg = CropSamplerConfig(resolution=sc.resolution)
    whole = AugRecord(CropBox(0.0, 0.0, 1.0, 1.0), False)
    eye = np.eye(sc.num_classes)

    built = {"OneHot": {}, "FKD": {}, "ReLabel": {}}
    unknown = set(include) - set(built)
    if unknown:
        raise ValueError(f"unknown built-in source(s) {sorted(unknown)}")
    if len(include) + len(extra_sources) < 2:
        raise ValueError("need at least two label sources")
    regions_by_key, kl = {}, []
    for i in range(sc.num_images):
        image, _ = make_image(world, i)
        cls = int(np.argmax(teacher.logits(apply_crop(image, whole, sc.resolution))))
        lmap = build_label_map(spec, image, sc.map_size)
        for c, aug in enumerate(aug_stream(crop_cfg, image_seed(sc.seed, i), sc.crops_per_image,
                                           image.shape)):
            key = (i, c)
            region = apply_crop(image, aug, sc.resolution)
            built["FKD"][key] = teacher.soft_label(region)
            built["ReLabel"][key] = relabel_soft_label(lmap, aug.box)
            built["OneHot"][key] = eye[cls]
            regions_by_key[key] = region
            if not _on_grid(aug.box, sc.map_size):
                kl.append(float(kl_divergence(built["FKD"][key], built["ReLabel"][key])))

    keys = sorted(regions_by_key)
    sources = [LabelSource(name, built[name]) for name in include]
    if extra_sources:
        stack = np.stack([regions_by_key[k] for k in keys])
        for name, fn in extra_sources:
            sources.append(LabelSource(name, dict(zip(keys, fn(stack)))))
    class_source = "OneHot" if "OneHot" in include else sources[0].name
    report = ce_matrix(sources, keys, class_source=class_source)

    kl = np.asarray(kl)
    stats = {
        "off_grid_crops": int(kl.size),
        "kl_positive_fraction": float(np.mean(kl > 0)) if kl.size else 0.0,
        "kl_min": float(kl.min()) if kl.size else 0.0,
        "kl_mean": float(kl.mean()) if kl.size else 0.0,
    }
    if {"OneHot", "FKD", "ReLabel"} <= set(include):
        d_rf = report.mean("ReLabel", "FKD")
        d_ro = report.mean("ReLabel", "OneHot")
        d_fo = report.mean("FKD", "OneHot")
        stats.update(D_RF=d_rf, D_RO=d_ro, D_FO=d_fo, margin=d_rf - max(d_ro, d_fo))
        stats["D_RF_gt_others"] = bool(stats["margin"] > 0)
    return report, stats
