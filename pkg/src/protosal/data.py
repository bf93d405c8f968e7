"""Patch datasets: synthetic H&E-like patches with a planted malignant
signal, image-directory ingestion, augmentation and a binary cache."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .autodiff import interp_matrix

PATCH_SIZE = 96
SPLITS = ("train", "val", "test")


@dataclass
class DatasetSplit:
    X: np.ndarray                  # (N, H, W, 3) float32 in [0, 1]
    y: np.ndarray                  # (N,) int64 in {0, 1}
    ids: list[str]
    masks: np.ndarray | None = None  # (N, H, W) uint8, synthetic only

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "DatasetSplit":
        idx = np.asarray(idx)
        return DatasetSplit(self.X[idx], self.y[idx], [self.ids[i] for i in idx],
                            None if self.masks is None else self.masks[idx])


@dataclass
class SyntheticConfig:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    malignant_fraction: float = 0.5
    size: int = PATCH_SIZE
    # background texture
    noise_octaves: int = 4
    texture_strength: float = 0.25
    stroma_color: tuple = (0.94, 0.72, 0.84)
    tissue_color: tuple = (0.78, 0.56, 0.80)
    # benign: a few light, scattered nuclei
    benign_nuclei: tuple = (3, 8)
    benign_radius: tuple = (2.0, 3.5)
    benign_darkness: float = 0.35
    # malignant: a dense cluster of large dark nuclei
    blob_count: tuple = (8, 16)
    blob_radius: tuple = (3.5, 6.5)
    darkness: float = 0.85
    cluster_spread: float = 10.0
    mask_area: tuple = (0.03, 0.30)
    nucleus_color: tuple = (0.30, 0.16, 0.45)
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.malignant_fraction < 1:
            raise ValueError("malignant_fraction must lie in (0, 1)")
        lo, hi = self.blob_radius
        if not 0 < lo <= hi or 2 * hi + 2 >= self.size:
            raise ValueError(f"blob_radius {self.blob_radius} does not fit a {self.size}px patch")
        if not 0 <= self.mask_area[0] < self.mask_area[1] <= 1:
            raise ValueError(f"invalid mask_area bounds {self.mask_area}")
        # the smallest possible cluster must be able to reach the minimum area
        max_area = self.blob_count[1] * np.pi * hi * hi / self.size ** 2
        if max_area < self.mask_area[0]:
            raise ValueError("mask_area minimum is unreachable with the configured blobs")
        if self.blob_count[0] < 1 or self.blob_count[0] > self.blob_count[1]:
            raise ValueError(f"invalid blob_count {self.blob_count}")

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()


@dataclass
class AugmentConfig:
    hflip: float = 0.5
    vflip: float = 0.5
    brightness: float = 0.1
    seed: int = 0


# ---------------------------------------------------------------------------
# synthetic generation

def _value_noise(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = rng.random((cells, cells))
        a = interp_matrix(cells, size)
        out += amp * (a @ grid @ a.T)
        total += amp
        amp *= 0.5
    return out / total


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float, theta: float):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    r = np.sqrt(u * u + v * v)
    inside = r <= 1.0
    alpha = np.clip((1.15 - r) / 0.3, 0.0, 1.0)   # soft edge
    return inside, alpha


def _paint(img, alpha, color, strength):
    a = (strength * alpha)[..., None]
    img *= 1 - a
    img += a * np.asarray(color)


def _background(rng, cfg: SyntheticConfig) -> np.ndarray:
    n = cfg.size
    mix = _value_noise(rng, n, cfg.noise_octaves)
    grain = _value_noise(rng, n, cfg.noise_octaves + 1)
    stroma, tissue = np.asarray(cfg.stroma_color), np.asarray(cfg.tissue_color)
    img = stroma * (1 - mix[..., None]) + tissue * mix[..., None]
    img *= 1 - cfg.texture_strength * (grain[..., None] - 0.5)
    return img


def _make_patch(cfg: SyntheticConfig, label: int, stream) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(stream)
    n = cfg.size
    img = _background(rng, cfg)
    for _ in range(rng.integers(cfg.benign_nuclei[0], cfg.benign_nuclei[1] + 1)):
        r = rng.uniform(*cfg.benign_radius)
        cy, cx = rng.uniform(r, n - r, size=2)
        _, alpha = _ellipse(n, cy, cx, r, r * rng.uniform(0.7, 1.0), rng.uniform(0, np.pi))
        _paint(img, alpha, cfg.nucleus_color, cfg.benign_darkness)
    mask = np.zeros((n, n), dtype=np.uint8)
    if label == 1:
        for _attempt in range(200):
            mask[:] = 0
            blobs = []
            hi = cfg.blob_radius[1]
            centre = rng.uniform(hi + cfg.cluster_spread / 2, n - hi - cfg.cluster_spread / 2, size=2)
            for _ in range(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1)):
                ry = rng.uniform(*cfg.blob_radius)
                rx = ry * rng.uniform(0.6, 1.0)
                cy, cx = np.clip(centre + rng.normal(0, cfg.cluster_spread, size=2), ry + 1, n - ry - 1)
                inside, alpha = _ellipse(n, cy, cx, ry, rx, rng.uniform(0, np.pi))
                mask |= inside
                blobs.append(alpha)
            area = mask.mean()
            if cfg.mask_area[0] <= area <= cfg.mask_area[1]:
                break
        else:
            raise ValueError("could not place a blob cluster within the configured mask_area bounds")
        for alpha in blobs:
            _paint(img, alpha, cfg.nucleus_color, cfg.darkness)
    img = np.clip(img + rng.normal(0, 0.01, img.shape), 0.0, 1.0)
    return img.astype(np.float32), mask


def _split_labels(n: int, frac: float, rng: np.random.Generator) -> np.ndarray:
    n_pos = int(round(n * frac))
    labels = np.r_[np.ones(n_pos, np.int64), np.zeros(n - n_pos, np.int64)]
    return labels[rng.permutation(n)]


def generate_synthetic(cfg: SyntheticConfig, n_jobs: int = 1) -> dict[str, DatasetSplit]:
    """Train/val/test splits; every patch has its own RNG stream derived from
    (seed, split, index), so the output does not depend on ``n_jobs``."""
    cfg.validate()
    out = {}
    for s, name in enumerate(SPLITS):
        n = getattr(cfg, f"n_{name}")
        labels = _split_labels(n, cfg.malignant_fraction, np.random.default_rng([cfg.seed, s, 1 << 20]))
        jobs = (delayed(_make_patch)(cfg, int(labels[i]), [cfg.seed, s, i]) for i in range(n))
        results = Parallel(n_jobs=n_jobs)(jobs) if n_jobs != 1 else [j[0](*j[1], **j[2]) for j in jobs]
        X = np.stack([r[0] for r in results])
        masks = np.stack([r[1] for r in results])
        out[name] = DatasetSplit(X, labels, [f"{name}-{i:05d}" for i in range(n)], masks)
    return out


def window_darkness_scores(X: np.ndarray, window: int = 24, stride: int = 8) -> np.ndarray:
    """Baseline detector: the darkest mean intensity over sliding windows."""
    dark = 1.0 - X.mean(axis=-1)
    n, h, w = dark.shape
    best = np.full(n, -np.inf)
    for i in range(0, h - window + 1, stride):
        for j in range(0, w - window + 1, stride):
            best = np.maximum(best, dark[:, i:i + window, j:j + window].mean(axis=(1, 2)))
    return best


# ---------------------------------------------------------------------------
# external images

def load_image_dir(path: str | Path, labels_file: str | Path, size: int = PATCH_SIZE) -> DatasetSplit:
    """Load 8-bit RGB images listed in a ``filename,label`` CSV, in file order.

    Every problem (missing file, undecodable image, bad label) is collected
    and reported together; nothing is returned if any record fails.
    """
    from PIL import Image

    root = Path(path)
    records, errors = [], []
    with open(labels_file, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            name, label = row[0].strip(), (row[1].strip() if len(row) > 1 else "")
            if lineno == 1 and name.lower() == "filename":
                continue
            if label not in ("0", "1"):
                errors.append(f"{name}: label {label!r} not in {{0, 1}}")
                continue
            records.append((name, int(label)))
    images = []
    for name, _ in records:
        fp = root / name
        if not fp.is_file():
            errors.append(f"{name}: missing file")
            continue
        try:
            with Image.open(fp) as im:
                im = im.convert("RGB")
                if im.size != (size, size):
                    im = im.resize((size, size), Image.BILINEAR)
                images.append(np.asarray(im, dtype=np.float32) / 255.0)
        except OSError as err:
            errors.append(f"{name}: cannot decode ({err})")
    if errors:
        raise ValueError("failed to load image directory:\n  " + "\n  ".join(errors))
    return DatasetSplit(np.stack(images), np.array([r[1] for r in records], dtype=np.int64),
                        [r[0] for r in records])


# ---------------------------------------------------------------------------
# augmentation

def augment(X: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig,
            mask: np.ndarray | None = None):
    """Random flips (independently per axis) and additive brightness with
    clamping. Works on one patch (H,W,C) or a batch (N,H,W,C); the mask is
    flipped together with the pixels."""
    single = X.ndim == 3
    X = X[None] if single else X
    M = None if mask is None else (mask[None] if single else mask)
    n = X.shape[0]
    h = rng.random(n) < cfg.hflip
    v = rng.random(n) < cfg.vflip
    delta = rng.uniform(-cfg.brightness, cfg.brightness, n) if cfg.brightness > 0 else np.zeros(n)
    out = X.copy()
    out[h] = out[h, :, ::-1]
    out[v] = out[v, ::-1]
    out = np.clip(out + delta[:, None, None, None].astype(out.dtype), 0.0, 1.0)
    if M is not None:
        M = M.copy()
        M[h] = M[h, :, ::-1]
        M[v] = M[v, ::-1]
    if single:
        out = out[0]
        M = None if M is None else M[0]
    return out if mask is None else (out, M)


# ---------------------------------------------------------------------------
# dataset cache
#
#   magic "PSDS" | u32 version | u64 seed | 32-byte config digest | u32 n_splits
#   per split: 8-byte name | u32 N,H,W,C | u8 has_mask | ids (u16 len + utf8)*N
#              | float32 LE pixels | u8 labels | u8 masks (if present)

CACHE_MAGIC = b"PSDS"


def save_cache(path: str | Path, splits: dict[str, DatasetSplit], seed: int = 0,
               digest: bytes = b"\0" * 32) -> None:
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<IQ", 1, seed))
    buf.write(digest[:32].ljust(32, b"\0"))
    buf.write(struct.pack("<I", len(splits)))
    for name, split in splits.items():
        n, h, w, c = split.X.shape
        buf.write(name.encode().ljust(8, b"\0")[:8])
        buf.write(struct.pack("<IIIIB", n, h, w, c, split.masks is not None))
        for sid in split.ids:
            raw = sid.encode()
            buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(np.ascontiguousarray(split.X, dtype="<f4").tobytes())
        buf.write(split.y.astype(np.uint8).tobytes())
        if split.masks is not None:
            buf.write(split.masks.astype(np.uint8).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_cache(path: str | Path) -> tuple[dict[str, DatasetSplit], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a dataset cache")
    version, seed = struct.unpack_from("<IQ", data, 4)
    digest = data[16:48]
    (n_splits,) = struct.unpack_from("<I", data, 48)
    pos = 52
    splits = {}
    for _ in range(n_splits):
        name = data[pos:pos + 8].rstrip(b"\0").decode()
        n, h, w, c, has_mask = struct.unpack_from("<IIIIB", data, pos + 8)
        pos += 25
        ids = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, pos)
            ids.append(data[pos + 2:pos + 2 + ln].decode())
            pos += 2 + ln
        count = n * h * w * c
        X = np.frombuffer(data, "<f4", count, pos).reshape(n, h, w, c).astype(np.float32)
        pos += 4 * count
        y = np.frombuffer(data, np.uint8, n, pos).astype(np.int64)
        pos += n
        masks = None
        if has_mask:
            masks = np.frombuffer(data, np.uint8, n * h * w, pos).reshape(n, h, w).copy()
            pos += n * h * w
        splits[name] = DatasetSplit(X, y, ids, masks)
    return splits, {"version": version, "seed": seed, "digest": digest.hex()}
