"""Student training on replayed soft labels, and the on-the-fly KD oracle.

Terminology: a *physical pass* visits every image once and takes ``m`` crops
from each, so it carries ``m`` *logical epochs* worth of samples. The cosine
schedule advances once per physical pass, which is what makes it serrated
when viewed per logical epoch.

The FKD loop (:func:`train_student`) and the oracle
(:func:`vanilla_kd_reference`) share one loop body and differ only in where
the crop labels come from: the label store, or the teacher called on the
spot. Every random stream is derived from ``(seed, pass, step)``, so a run
resumed from a pass-boundary checkpoint replays the uninterrupted run
bit-for-bit.
"""

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import check_distribution, log_softmax, softmax
from .pipeline import (Batch, BatchPlan, LoaderCost, apply_crop, assemble_batch, aug_stream,
                       batch_permutation, crop_window, image_seed, prefetch)
from .teacher import LabelMode, build_teacher

CHECKPOINT_VERSION = 1


class Schedule(str, enum.Enum):
    SERRATED_COSINE = "serrated_cosine"
    STEP_MILESTONES = "step_milestones"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 40
    crops_per_image: int = 4
    passes: int = 10
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: Schedule = Schedule.SERRATED_COSINE
    milestones: tuple = ()
    gamma: float = 0.1
    hidden: int = 64
    seed: int = 0
    ssl_tau: float = 0.2
    prefetch: int = 2

    def __post_init__(self):
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "milestones", tuple(int(v) for v in self.milestones))
        if self.crops_per_image < 1 or self.batch_size % self.crops_per_image:
            raise ValueError("batch size must be a positive multiple of crops per image")
        if self.passes < 1 or self.hidden < 1:
            raise ValueError("passes and hidden must be positive")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimizer hyper-parameters")
        if not self.ssl_tau > 0:
            raise ValueError("temperature must be positive")

    @property
    def images_per_batch(self):
        return self.batch_size // self.crops_per_image

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = self.schedule.value
        d["milestones"] = list(self.milestones)
        return d


# ------------------------------------------------------------------ student

class Student:
    """Two-layer ReLU perceptron over flattened regions, parameters in one flat vector."""

    def __init__(self, n_in, hidden, num_classes):
        self.n_in, self.hidden, self.num_classes = n_in, hidden, num_classes
        self.shapes = [("w1", (n_in, hidden)), ("b1", (hidden,)),
                       ("w2", (hidden, num_classes)), ("b2", (num_classes,))]
        self.size = sum(math.prod(s) for _, s in self.shapes)

    def init(self, seed):
        rng = np.random.default_rng([seed, 7])
        p = self.unpack(np.zeros(self.size))
        p["w1"][:] = rng.standard_normal(p["w1"].shape) * np.sqrt(2.0 / self.n_in)
        p["w2"][:] = rng.standard_normal(p["w2"].shape) * np.sqrt(1.0 / self.hidden)
        return self.pack(p)

    def unpack(self, theta):
        out, i = {}, 0
        for name, shape in self.shapes:
            n = math.prod(shape)
            out[name] = theta[i:i + n].reshape(shape)
            i += n
        return out

    def pack(self, parts):
        return np.concatenate([parts[name].ravel() for name, _ in self.shapes])

    def forward(self, theta, x):
        p = self.unpack(theta)
        pre = x @ p["w1"] + p["b1"]
        h = np.maximum(pre, 0.0)
        return h @ p["w2"] + p["b2"], (x, pre, h)

    def backward(self, theta, cache, grad_logits):
        p = self.unpack(theta)
        x, pre, h = cache
        dh = grad_logits @ p["w2"].T
        dh[pre <= 0] = 0.0
        return self.pack({"w1": x.T @ dh, "b1": dh.sum(axis=0),
                          "w2": h.T @ grad_logits, "b2": grad_logits.sum(axis=0)})


def soft_ce_loss(pred_logits, targets, tau=1.0, targets_are_logits=False):
    """Mean soft-target cross-entropy and its gradient w.r.t. ``pred_logits``.

    With ``targets_are_logits`` (SSL labels) the targets are turned into
    probabilities with ``softmax(targets / tau)``; student logits are always
    divided by ``tau``. Supervised targets must already be distributions.
    """
    pred_logits = np.asarray(pred_logits, dtype=np.float64)
    if pred_logits.ndim != 2:
        raise ValueError("expected a batch of logits")
    if targets_are_logits:
        p = softmax(targets, tau)
    else:
        p = check_distribution(targets)
    if p.shape != pred_logits.shape:
        raise ValueError(f"shape mismatch: {pred_logits.shape} vs {p.shape}")
    n = pred_logits.shape[0]
    loss = -np.sum(p * log_softmax(pred_logits, tau)) / n
    grad = (softmax(pred_logits, tau) - p) / (tau * n)
    return float(loss), grad


# ---------------------------------------------------------------- optimizer

@dataclass
class TrainState:
    theta: np.ndarray
    velocity: np.ndarray
    pass_index: int = 0
    step: int = 0
    losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    def copy(self):
        return TrainState(self.theta.copy(), self.velocity.copy(), self.pass_index, self.step,
                          list(self.losses), [dict(m) for m in self.metrics])


def sgd_step(state, grads, lr, momentum=0.9, weight_decay=1e-4):
    """One momentum-SGD update with L2 weight decay folded into the gradient.

    ``v <- momentum * v + (g + weight_decay * theta)``, ``theta <- theta - lr * v``.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError(f"non-finite gradient at step {state.step}")
    d = grads + weight_decay * state.theta if weight_decay else grads
    state.velocity = momentum * state.velocity + d if momentum else d
    state.theta = state.theta - lr * state.velocity
    state.step += 1
    return state


# ---------------------------------------------------------------- scheduler

@dataclass(frozen=True)
class SchedulerState:
    base_lr: float
    total_passes: int
    crops_per_image: int
    pass_index: int
    sub_epoch: int = 0
    mode: Schedule = Schedule.SERRATED_COSINE
    milestones: tuple = ()
    gamma: float = 0.1

    @property
    def logical_epoch(self):
        return self.pass_index * self.crops_per_image + self.sub_epoch


def serrated_lr(s):
    """Learning rate for physical pass ``s.pass_index`` (and sub-epoch for step mode).

    Cosine: ``base * (1 + cos(pi * e / E)) / 2`` with ``e`` the physical pass,
    shared by all ``m`` logical epochs inside it. Step: ``base * gamma**k``
    with ``k`` the number of milestones (in logical epochs) already reached,
    which does not depend on ``m``.
    """
    if not 0 <= s.pass_index < s.total_passes:
        raise ValueError(f"pass index {s.pass_index} outside [0, {s.total_passes})")
    if not 0 <= s.sub_epoch < s.crops_per_image:
        raise ValueError("sub-epoch outside the physical pass")
    if Schedule(s.mode) == Schedule.SERRATED_COSINE:
        return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * s.pass_index / s.total_passes))
    k = sum(1 for t in s.milestones if s.logical_epoch >= t)
    return s.base_lr * s.gamma ** k


def lr_schedule(base_lr, total_passes, crops_per_image, mode, milestones=(), gamma=0.1):
    """The lr of every logical epoch of a run, in order."""
    return [serrated_lr(SchedulerState(base_lr, total_passes, crops_per_image, e, j, mode,
                                       tuple(milestones), gamma))
            for e in range(total_passes) for j in range(crops_per_image)]


# --------------------------------------------------------------- main loop

def _pass_groups(num_images, cfg, pass_index):
    rng = np.random.default_rng([cfg.seed, 11, pass_index])
    order = rng.permutation(num_images)
    per = cfg.images_per_batch
    usable = num_images - num_images % per
    if usable == 0:
        raise ValueError(f"need at least {per} images for one batch")
    return order[:usable].reshape(-1, per)


def _plan(cfg, ids, pass_index, step_in_pass):
    return BatchPlan(cfg.batch_size, cfg.crops_per_image, [int(i) for i in ids], pass_index,
                     perm_seed=[cfg.seed, 13, pass_index, step_in_pass])


def _run(num_images, num_classes, n_in, cfg, batches, state=None, stop_after=None,
         on_pass_end=None, targets_are_logits=False):
    student = Student(n_in, cfg.hidden, num_classes)
    if state is None:
        theta = student.init(cfg.seed)
        state = TrainState(theta, np.zeros_like(theta))
    else:
        state = state.copy()
    tau = cfg.ssl_tau if targets_are_logits else 1.0
    m = cfg.crops_per_image
    last = cfg.passes if stop_after is None else min(cfg.passes, stop_after)

    for e in range(state.pass_index, last):
        groups = _pass_groups(num_images, cfg, e)
        steps = len(groups)
        sums = np.zeros((m, 3))
        lrs = [0.0] * m
        for s, batch in enumerate(prefetch(batches(groups, e), cfg.prefetch)):
            j = s * m // steps
            lr = serrated_lr(SchedulerState(cfg.base_lr, cfg.passes, m, e, j, cfg.schedule,
                                            cfg.milestones, cfg.gamma))
            x = batch.regions.reshape(cfg.batch_size, -1)
            logits, cache = student.forward(state.theta, x)
            loss, g = soft_ce_loss(logits, batch.targets, tau, targets_are_logits)
            grads = student.backward(state.theta, cache, g)
            sgd_step(state, grads, lr, cfg.momentum, cfg.weight_decay)
            state.losses.append(loss)
            acc = float(np.mean(np.argmax(logits, 1) == np.argmax(batch.targets, 1)))
            sums[j] += (loss, acc, 1)
            lrs[j] = lr
        for j in range(m):
            n = max(sums[j, 2], 1)
            state.metrics.append({"epoch": e * m + j, "lr": lrs[j], "loss": sums[j, 0] / n,
                                  "accuracy": sums[j, 1] / n})
        state.pass_index = e + 1
        if on_pass_end is not None:
            on_pass_end(state)
    return state


def train_student(store, cfg, state=None, stop_after=None, on_pass_end=None, ssl=False):
    """Train on a label store for ``cfg.passes`` physical passes.

    ``state`` resumes from a checkpoint; ``stop_after`` ends the run after
    that many passes (for interruption tests); ``on_pass_end`` is called with
    the state at every pass boundary.
    """
    r = store.resolution

    def batches(groups, e):
        for s, ids in enumerate(groups):
            yield assemble_batch(store, _plan(cfg, ids, e, s), r)

    channels = np.shape(store.load_image(0))[2]
    n_in = r * r * channels
    return _run(len(store), store.num_classes, n_in, cfg, batches, state, stop_after,
                on_pass_end, targets_are_logits=ssl)


def vanilla_kd_reference(images, teacher_spec, cfg, crop_cfg, label_seed, num_crops,
                         state=None, stop_after=None):
    """The same loop with labels computed by the teacher at training time.

    Crops follow the seeded per-image stream a label store built with
    ``(crop_cfg, label_seed, num_crops)`` would have recorded, so a
    Full-mode store must reproduce this run exactly.
    """
    teacher = build_teacher(teacher_spec)
    r = crop_cfg.resolution
    ssl = teacher_spec.mode == LabelMode.SSL

    def batches(groups, e):
        for s, ids in enumerate(groups):
            plan = _plan(cfg, ids, e, s)
            regions, targets, iids, cids = [], [], [], []
            for idx in plan.image_ids:
                image = images[idx]
                augs = aug_stream(crop_cfg, image_seed(label_seed, idx), num_crops, image.shape)
                for c in crop_window(e, cfg.crops_per_image, num_crops):
                    region = apply_crop(image, augs[c], r)
                    regions.append(region)
                    targets.append(teacher.soft_label(region))
                    iids.append(idx)
                    cids.append(c)
            perm = batch_permutation(plan)
            yield Batch(np.stack(regions)[perm], np.stack(targets)[perm],
                        np.asarray(iids)[perm], np.asarray(cids)[perm],
                        LoaderCost(len(plan.image_ids), 0))

    n_in = int(np.prod(teacher_spec.region_shape))
    return _run(len(images), teacher_spec.num_classes, n_in, cfg, batches, state, stop_after,
                targets_are_logits=ssl)


# -------------------------------------------------------------- artifacts

METRIC_FIELDS = ("epoch", "lr", "loss", "accuracy")


def metrics_csv(metrics):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for row in metrics:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def write_metrics(path, metrics):
    Path(path).write_text(metrics_csv(metrics))


def read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{"epoch": int(r["epoch"]), "lr": float(r["lr"]), "loss": float(r["loss"]),
             "accuracy": float(r["accuracy"])} for r in rows]


def save_checkpoint(path, state, cfg=None):
    meta = {"version": CHECKPOINT_VERSION, "pass_index": state.pass_index, "step": state.step,
            "metrics": state.metrics, "config": cfg.to_dict() if cfg else None}
    with open(path, "wb") as f:
        np.savez(f, theta=state.theta, velocity=state.velocity,
                 losses=np.asarray(state.losses, dtype=np.float64),
                 meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))


def load_checkpoint(path):
    """Return ``(state, config_dict_or_None)``."""
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        state = TrainState(z["theta"].copy(), z["velocity"].copy(), meta["pass_index"],
                           meta["step"], z["losses"].tolist(), meta["metrics"])
    return state, meta["config"]


def predict(theta, cfg, n_in, num_classes, regions):
    """Student class probabilities for a stack of regions."""
    student = Student(n_in, cfg.hidden, num_classes)
    logits, _ = student.forward(theta, np.asarray(regions).reshape(len(regions), -1))
    return softmax(logits)

