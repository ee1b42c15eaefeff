"""The ``.fkdl`` label file format and storage accounting.

Layout (little-endian, no padding)::

    header   magic "FKDL" | version u16 | mode u8 | C u32 | K u16 | M u32   (17 bytes)
    record   x, y, w, h f32 | flip u8 | indices u32[n_idx] | values f32[n_val]

with ``(n_idx, n_val)`` fixed by the mode: FULL and SSL_LOGITS ``(0, C)``,
HARD ``(1, 0)``, SMOOTH ``(1, 1)``, marginal modes ``(K, K)``.

Mode code 6 stores a ReLabel-style label map instead of crop records: the
``M`` field holds the spatial size S and the body is ``S*S*C`` f32 scores in
row-major (row, col, class) order.
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quantize import (FULL, HARD, SMOOTH, CompressedLabel, Kind, QuantizationMode,
                       marginal_renorm_mode, marginal_smooth_mode)

MAGIC = b"FKDL"
VERSION = 1
LABEL_MAP_CODE = 6
HEADER = struct.Struct("<4sHBIHI")
HEADER_SIZE = HEADER.size
BOX_TOL = 1e-6
D_DA = 5


class LabelFormatError(ValueError):
    pass


class BadMagicError(LabelFormatError):
    pass


class TruncatedError(LabelFormatError):
    pass


class UnknownModeError(LabelFormatError):
    pass


class PayloadError(LabelFormatError):
    pass


@dataclass(frozen=True)
class CropBox:
    """Normalized crop rectangle: top-left ``(x, y)``, extent ``(w, h)``."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite crop box {vals}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"crop box needs positive extent, got w={self.w} h={self.h}")
        if self.x < -BOX_TOL or self.y < -BOX_TOL:
            raise ValueError(f"crop box origin outside image: ({self.x}, {self.y})")
        if self.x + self.w > 1 + BOX_TOL or self.y + self.h > 1 + BOX_TOL:
            raise ValueError(f"crop box extends past the image: {vals}")

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class AugRecord:
    box: CropBox
    flip: bool


@dataclass(frozen=True)
class CropRecord:
    aug: AugRecord
    label: CompressedLabel


@dataclass(eq=False)
class LabelFile:
    mode: QuantizationMode
    num_classes: int
    records: list = field(default_factory=list)
    version: int = VERSION

    @property
    def k(self):
        return self.mode.k

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, LabelFile):
            return NotImplemented
        return encode(self) == encode(other)

    def validate(self):
        if not self.records:
            raise ValueError("a label file needs at least one record")
        if self.num_classes < 2:
            raise ValueError(f"C must be >= 2, got {self.num_classes}")
        self.mode.validate_for(self.num_classes)
        for i, rec in enumerate(self.records):
            if rec.label.mode != self.mode:
                raise ValueError(
                    f"record {i} has mode {rec.label.mode.name}, file mode is {self.mode.name}")
            rec.label.validate(self.num_classes)


def _payload_counts(mode, num_classes):
    kind = mode.kind
    if kind in (Kind.FULL, Kind.SSL_LOGITS):
        return 0, num_classes
    if kind == Kind.HARD:
        return 1, 0
    if kind == Kind.SMOOTH:
        return 1, 1
    return mode.k, mode.k


def to_f32(x):
    """Round to the on-disk float width, returned as float64."""
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


def record_dtype(mode, num_classes):
    n_idx, n_val = _payload_counts(mode, num_classes)
    fields = [("box", "<f4", (4,)), ("flip", "u1")]
    if n_idx:
        fields.append(("indices", "<u4", (n_idx,)))
    if n_val:
        fields.append(("values", "<f4", (n_val,)))
    return np.dtype(fields)


def record_size(mode, num_classes):
    return record_dtype(mode, num_classes).itemsize


def encoded_size(mode, num_classes, num_records):
    return HEADER_SIZE + num_records * record_size(mode, num_classes)


def encode(f):
    """Serialize a :class:`LabelFile`.

    Floats are written as f32. Files built by the label generator only carry
    f32-representable values, so ``decode(encode(f)) == f`` holds bitwise.
    """
    f.validate()
    dt = record_dtype(f.mode, f.num_classes)
    body = np.zeros(len(f.records), dtype=dt)
    for i, rec in enumerate(f.records):
        vals = np.concatenate([rec.aug.box.as_tuple(), rec.label.values])
        if not np.array_equal(vals.astype(np.float32).astype(np.float64), vals):
            raise PayloadError(f"record {i}: values are not float32-representable; "
                               "round them with to_f32() before compressing")
        body["box"][i] = rec.aug.box.as_tuple()
        body["flip"][i] = 1 if rec.aug.flip else 0
        if "indices" in dt.names:
            body["indices"][i] = rec.label.indices
        if "values" in dt.names:
            body["values"][i] = rec.label.values
    header = HEADER.pack(MAGIC, f.version, int(f.mode.kind), f.num_classes, f.mode.k,
                         len(f.records))
    return header + body.tobytes()


def _read_header(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes")
    return HEADER.unpack_from(data)


def decode(data):
    """Parse and fully validate ``.fkdl`` bytes into a :class:`LabelFile`."""
    data = bytes(data)
    _, version, code, num_classes, k, m = _read_header(data)
    if version != VERSION:
        raise LabelFormatError(f"unsupported version {version}")
    if code == LABEL_MAP_CODE:
        raise UnknownModeError("this is a label-map container; use decode_label_map")
    try:
        kind = Kind(code)
    except ValueError:
        raise UnknownModeError(f"unknown mode code {code}") from None
    try:
        mode = QuantizationMode(kind, k if kind.uses_k else 0)
        if not kind.uses_k and k != 0:
            raise ValueError(f"K must be 0 for {kind.name}, header has {k}")
        mode.validate_for(num_classes)
    except ValueError as exc:
        raise PayloadError(f"inconsistent header: {exc}") from None
    if m < 1:
        raise PayloadError("label file declares zero records")
    dt = record_dtype(mode, num_classes)
    expected = HEADER_SIZE + m * dt.itemsize
    if len(data) < expected:
        raise TruncatedError(f"truncated records: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise LabelFormatError(f"{len(data) - expected} trailing bytes after records")
    body = np.frombuffer(data, dtype=dt, count=m, offset=HEADER_SIZE)

    records = []
    for i in range(m):
        row = body[i]
        flip = int(row["flip"])
        if flip not in (0, 1):
            raise PayloadError(f"record {i}: flip byte {flip} is not 0/1")
        idx = row["indices"].astype(np.int64) if "indices" in dt.names else np.empty(0, np.int64)
        if idx.size and np.any(idx >= num_classes):
            raise PayloadError(f"record {i}: class index >= C={num_classes}")
        vals = row["values"].astype(np.float64) if "values" in dt.names else np.empty(0)
        try:
            box = CropBox(*(float(v) for v in row["box"]))
            label = CompressedLabel(mode, idx, vals)
            label.validate(num_classes)
        except ValueError as exc:
            raise PayloadError(f"record {i}: {exc}") from None
        records.append(CropRecord(AugRecord(box, bool(flip)), label))
    return LabelFile(mode, num_classes, records, version)


def write_label_file(path, f):
    data = encode(f)
    Path(path).write_bytes(data)
    return len(data)


def read_label_file(path):
    return decode(Path(path).read_bytes())


def encode_label_map(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[0] != grid.shape[1] or grid.shape[0] < 1:
        raise ValueError(f"label map must be S x S x C, got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("label map contains non-finite scores")
    s, _, c = grid.shape
    header = HEADER.pack(MAGIC, VERSION, LABEL_MAP_CODE, c, 0, s)
    return header + grid.astype("<f4").tobytes()


def decode_label_map(data):
    data = bytes(data)
    _, version, code, c, _, s = _read_header(data)
    if code != LABEL_MAP_CODE:
        raise UnknownModeError(f"expected label-map code {LABEL_MAP_CODE}, got {code}")
    expected = HEADER_SIZE + s * s * c * 4
    if len(data) < expected:
        raise TruncatedError(f"truncated label map: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise LabelFormatError(f"{len(data) - expected} trailing bytes after label map")
    grid = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE).reshape(s, s, c)
    return grid.astype(np.float64)


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: str
    num_crops: int
    mode: QuantizationMode


def write_manifest(path, entries):
    lines = [f"{e.image_id}\t{e.path}\t{e.num_crops}\t{e.mode.name}\n" for e in entries]
    Path(path).write_text("".join(lines))


def read_manifest(path):
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise LabelFormatError(f"manifest line {lineno}: expected 4 tab-separated fields")
        image_id, rel, m, mode = parts
        entries.append(ManifestEntry(image_id, rel, int(m), QuantizationMode.parse(mode)))
    return entries


# ------------------------------------------------------------ storage model

GIB = 2 ** 30
TIB = 2 ** 40


@dataclass(frozen=True)
class StorageModel:
    """Inputs to the disk-consumption estimate.

    ``bytes_per_value`` and ``d_da`` follow the accounting in which every
    stored scalar (class index, probability, box coordinate, flip) costs
    4 bytes.
    """

    n_images: int
    crops_per_image: int
    num_classes: int
    label_map_size: int = 15
    d_da: int = D_DA
    bytes_per_value: int = 4

    def __post_init__(self):
        for name in ("n_images", "crops_per_image", "num_classes", "label_map_size",
                     "bytes_per_value"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def values_per_crop(model, mode):
    return mode.payload_values(model.num_classes) + model.d_da


def estimate_fkd_storage(model, mode):
    """Bytes needed for an FKD label store under ``mode``."""
    return int(model.n_images * model.crops_per_image * values_per_crop(model, mode)
               * model.bytes_per_value)


def estimate_relabel_storage(model, topk=None):
    """Bytes for a ReLabel-style global label map store.

    Full maps keep all C scores per cell; the top-k variant keeps k
    (index, score) pairs per cell.
    """
    cells = model.n_images * model.label_map_size ** 2
    per_cell = model.num_classes if topk is None else 2 * topk
    return int(cells * per_cell * model.bytes_per_value)


def storage_table(model, ks=(5, 10)):
    """Rows of ``(column, values_per_crop_or_cell, bytes)``, ReLabel columns first."""
    s2 = model.label_map_size ** 2
    rows = [
        ("relabel_full", s2 * model.num_classes, estimate_relabel_storage(model)),
        ("relabel_top5", s2 * 10, estimate_relabel_storage(model, topk=5)),
    ]
    modes = [FULL, HARD, SMOOTH, marginal_renorm_mode(ks[0])]
    modes += [marginal_smooth_mode(k) for k in ks]
    for mode in modes:
        rows.append((mode.name, model.crops_per_image * values_per_crop(model, mode),
                     estimate_fkd_storage(model, mode)))
    return rows


def format_bytes(n):
    """Human-readable size in binary units: TiB from half a TiB upward, else GiB."""
    if n >= 0.5 * TIB:
        return f"{n / TIB:.3f} TiB"
    return f"{n / GIB:.2f} GiB"
