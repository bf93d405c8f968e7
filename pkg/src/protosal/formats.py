"""Heatmap container and CSV helpers shared by the pipeline stages.

Heatmap container layout (little-endian)::

    b"PSHM" | u32 version | u32 record count
    per record: 48-byte image id | 48-byte source | i32 target class
                | u8 absolute flag | 3 pad bytes | u32 height | u32 width
                | height*width float32 values, row-major
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PSHM"
VERSION = 1
_ID = 48
_HEADER = struct.Struct(f"<{_ID}s{_ID}siB3xII")


@dataclass
class HeatmapRecord:
    image_id: str
    source: str                 # method id or "prototype:<id>"
    target_class: int
    values: np.ndarray          # (H, W) float32
    absolute: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"heatmap must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError(f"heatmap {self.image_id}/{self.source} has non-finite values")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _pack_id(text: str) -> bytes:
    raw = text.encode()
    if len(raw) > _ID:
        raise ValueError(f"identifier {text!r} longer than {_ID} bytes")
    return raw


def write_heatmaps(path, records: list[HeatmapRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(records)))
        for r in records:
            fh.write(_HEADER.pack(_pack_id(r.image_id), _pack_id(r.source), int(r.target_class),
                                  int(bool(r.absolute)), r.height, r.width))
            fh.write(r.values.astype("<f4").tobytes())


def read_heatmaps(path) -> list[HeatmapRecord]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a heatmap container")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported heatmap container version {version}")
    pos, out = 12, []
    for _ in range(count):
        img, src, cls, absolute, h, w = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        vals = np.frombuffer(data, "<f4", h * w, pos).reshape(h, w).astype(np.float32)
        pos += 4 * h * w
        out.append(HeatmapRecord(img.rstrip(b"\0").decode(), src.rstrip(b"\0").decode(), cls, vals, bool(absolute)))
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def export_json(path, records: list[HeatmapRecord]) -> None:
    doc = [{"image_id": r.image_id, "source": r.source, "target_class": r.target_class,
            "absolute": r.absolute, "height": r.height, "width": r.width,
            "values": [float(v) for v in r.values.ravel()]} for r in records]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def import_json(path) -> list[HeatmapRecord]:
    doc = json.loads(Path(path).read_text())
    return [HeatmapRecord(d["image_id"], d["source"], d["target_class"],
                          np.asarray(d["values"], dtype=np.float32).reshape(d["height"], d["width"]),
                          d["absolute"]) for d in doc]


def fmt(value) -> str:
    """Stable text for CSV cells: ints as-is, floats by shortest repr."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
