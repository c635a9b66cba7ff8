"""Multi-modal samples on disk: a minimal binary tensor container, a
deterministic procedural dataset generator, augmentation, and the noise /
modality-dropping transforms used by the robustness evaluations."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MMT1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
DTYPE_FOR = {np.dtype("float32"): 0, np.dtype("uint8"): 1}

# known sensor streams: channel count and whether the raster is dense
MODALITY_INFO = {
    "rgb": (3, "dense"),
    "depth": (1, "dense"),
    "event": (1, "sparse"),
    "lidar": (1, "sparse"),
}

SPARSITY_FLOOR = {"event": 0.90, "lidar": 0.95}


class DataError(Exception):
    """Dataset-level failure (missing files, bad manifest, bad arguments)."""


class TensorFileError(DataError):
    """Malformed tensor container."""


class BadMagicError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


class PayloadSizeError(TensorFileError):
    """Header promises a different byte count than the file carries."""


class InvalidHeaderError(TensorFileError):
    pass


# -- tensor container ----------------------------------------------------------

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in DTYPE_FOR:
        raise UnsupportedDtypeError(f"dtype {arr.dtype} not storable (float32/uint8 only)")
    if arr.ndim > 255:
        raise InvalidHeaderError("rank exceeds 255")
    for extent in arr.shape:
        if extent <= 0 or extent > 0xFFFFFFFF:
            raise InvalidHeaderError(f"extent {extent} outside [1, 2^32)")
    header = MAGIC + struct.pack("<BB", DTYPE_FOR[arr.dtype], arr.ndim)
    header += b"".join(struct.pack("<I", e) for e in arr.shape)
    if arr.dtype == np.dtype("float32"):
        payload = arr.astype("<f4", copy=False).tobytes()  # tobytes is C-ordered
    else:
        payload = arr.tobytes()
    return header + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 6:
        raise PayloadSizeError(f"file too short for a header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    dtype_code, rank = struct.unpack_from("<BB", blob, 4)
    if dtype_code not in DTYPE_CODES:
        raise UnsupportedDtypeError(f"unknown dtype code {dtype_code}")
    offset = 6
    if len(blob) < offset + 4 * rank:
        raise PayloadSizeError("file too short for the promised extents")
    shape = struct.unpack_from(f"<{rank}I" if rank else "<0I", blob, offset)
    offset += 4 * rank
    if any(e == 0 for e in shape):
        raise InvalidHeaderError(f"zero extent in shape {shape}")
    dtype = DTYPE_CODES[dtype_code]
    count = 1
    for e in shape:
        count *= e
    expected = count * dtype.itemsize
    actual = len(blob) - offset
    if actual != expected:
        raise PayloadSizeError(f"payload holds {actual} bytes, header promises {expected}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).copy()


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return decode_tensor(blob)


# -- samples -------------------------------------------------------------------

@dataclass
class ModalitySample:
    sample_id: str
    modalities: dict[str, np.ndarray]   # name -> float32 [C,H,W] in [0,255]
    label: np.ndarray                   # uint8 [H,W], 255 = ignore

    def spatial(self):
        return self.label.shape

    def copy(self) -> "ModalitySample":
        return ModalitySample(self.sample_id,
                              {k: v.copy() for k, v in self.modalities.items()},
                              self.label.copy())


@dataclass
class NoiseSpec:
    kind: str                    # "gaussian" | "uniform"
    modality: str
    seed: int = 0
    gaussian_scale: float = 50.0
    uniform_low: float = -100.0
    uniform_high: float = 100.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise kind {self.kind!r}")

    def describe(self) -> str:
        return f"{self.kind}:{self.modality}"


def inject_noise(sample: ModalitySample, spec: NoiseSpec) -> ModalitySample:
    """Add seeded noise to the targeted raster and clip back to [0, 255]."""
    if spec.modality not in sample.modalities:
        raise DataError(f"sample has no modality {spec.modality!r}")
    rng = np.random.default_rng(spec.seed)
    out = sample.copy()
    raster = out.modalities[spec.modality]
    if spec.kind == "gaussian":
        noise = rng.standard_normal(raster.shape) * spec.gaussian_scale
    else:
        noise = rng.uniform(spec.uniform_low, spec.uniform_high, raster.shape)
    out.modalities[spec.modality] = np.clip(
        raster + noise.astype(np.float32), 0.0, 255.0).astype(np.float32)
    return out


def drop_modalities(sample: ModalitySample, keep) -> ModalitySample:
    keep = list(keep)
    if not keep:
        raise DataError("cannot drop every modality")
    missing = [m for m in keep if m not in sample.modalities]
    if missing:
        raise DataError(f"sample lacks modalities {missing}")
    return ModalitySample(sample.sample_id,
                          {m: sample.modalities[m].copy() for m in keep},
                          sample.label.copy())


# -- synthetic scenes ----------------------------------------------------------

@dataclass
class _Shape:
    kind: str          # "rect" | "ellipse"
    cls: int
    cy: float
    cx: float
    ry: float
    rx: float
    color: np.ndarray
    depth: float
    slope: float


def class_color(cls: int) -> np.ndarray:
    """Stable base color per class: rgb is the stream that identifies class,
    the other sensors carry geometry only."""
    return np.random.default_rng([9991, cls]).uniform(70.0, 240.0, 3)


def _shape_mask(shape: _Shape, h: int, w: int) -> np.ndarray:
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    if shape.kind == "rect":
        return ((np.abs(ys - shape.cy) <= shape.ry)
                & (np.abs(xs - shape.cx) <= shape.rx))
    return (((ys - shape.cy) / shape.ry) ** 2 + ((xs - shape.cx) / shape.rx) ** 2) <= 1.0


def _edge(mask: np.ndarray) -> np.ndarray:
    interior = mask.copy()
    for shift, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
        interior &= np.roll(mask, shift, axis=axis)
    return mask & ~interior


def _thin(raster: np.ndarray, floor: float, rng) -> np.ndarray:
    """Zero out surplus nonzeros so at least ``floor`` of pixels stay zero."""
    limit = int(raster.size * (1.0 - floor))
    nz = np.flatnonzero(raster)
    if len(nz) > limit:
        drop = rng.permutation(nz)[limit:]
        flat = raster.reshape(-1)
        flat[drop] = 0.0
    return raster


def _render_sample(rng, classes: int, h: int, w: int, modalities) -> ModalitySample:
    n_shapes = int(rng.integers(1, 3))
    shapes = []
    masks = []
    occupied = np.zeros((h, w), dtype=bool)
    for _ in range(n_shapes):
        # prefer non-overlapping placements; accept the last try regardless
        for _attempt in range(8):
            ry = float(rng.integers(max(h // 8, 3), max(h // 4, 4)))
            rx = float(rng.integers(max(w // 8, 3), max(w // 4, 4)))
            cls = int(rng.integers(1, classes))
            shape = _Shape(
                kind="rect" if rng.random() < 0.5 else "ellipse",
                cls=cls,
                cy=float(rng.uniform(ry, h - ry)),
                cx=float(rng.uniform(rx, w - rx)),
                ry=ry, rx=rx,
                color=class_color(cls) * rng.uniform(0.85, 1.15),
                depth=float(rng.uniform(60.0, 220.0)),
                slope=float(rng.uniform(-10.0, 10.0)),
            )
            mask = _shape_mask(shape, h, w)
            if not (mask & occupied).any():
                break
        shapes.append(shape)
        masks.append(mask)
        occupied |= mask

    label = np.zeros((h, w), dtype=np.uint8)
    for s, m in zip(shapes, masks):
        label[m] = s.cls

    # depth is rendered first so the lidar rings can sample from it
    depth = (230.0 - 140.0 * np.arange(h, dtype=np.float64)[:, None] / max(h - 1, 1))
    depth = np.broadcast_to(depth, (h, w)).copy()
    for s, m in zip(shapes, masks):
        ramp = (np.arange(w, dtype=np.float64)[None, :] - s.cx) / max(s.rx, 1.0)
        depth[m] = s.depth + (s.slope * ramp * np.ones((h, 1)))[m]
    depth += rng.standard_normal((h, w)) * 3.0
    depth = np.clip(depth, 0.0, 255.0)

    rasters: dict[str, np.ndarray] = {}
    for name in modalities:
        if name not in MODALITY_INFO:
            raise DataError(f"unknown modality {name!r}; known: {sorted(MODALITY_INFO)}")
        if name == "rgb":
            img = np.empty((3, h, w), dtype=np.float64)
            img[:] = rng.uniform(20.0, 70.0, 3)[:, None, None]
            for s, m in zip(shapes, masks):
                img[:, m] = s.color[:, None]
            img += rng.standard_normal((3, h, w)) * 8.0
            rasters[name] = np.clip(img, 0.0, 255.0).astype(np.float32)
        elif name == "depth":
            rasters[name] = depth.astype(np.float32)[None]
        elif name == "event":
            # partial outlines plus clutter: a supplementary geometry cue,
            # not a clean boundary oracle
            ev = np.zeros((h, w), dtype=np.float32)
            for m in masks:
                e = _edge(m)
                fire = e & (rng.random((h, w)) < 0.5)
                ev[fire] = rng.uniform(120.0, 255.0, int(fire.sum()))
            speckle = rng.random((h, w)) < 0.006
            ev[speckle] = rng.uniform(80.0, 255.0, int(speckle.sum()))
            rasters[name] = _thin(ev, SPARSITY_FLOOR["event"], rng)[None]
        elif name == "lidar":
            li = np.zeros((h, w), dtype=np.float32)
            cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
            max_r = int(np.hypot(cy, cx))
            for r in range(4, max_r + 1, 6):
                n_pts = max(int(2 * np.pi * r / 3.0), 8)
                angles = np.linspace(0.0, 2 * np.pi, n_pts, endpoint=False)
                ys = np.round(cy + r * np.sin(angles)).astype(int)
                xs = np.round(cx + r * np.cos(angles)).astype(int)
                ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
                li[ys[ok], xs[ok]] = depth[ys[ok], xs[ok]]
            rasters[name] = _thin(li, SPARSITY_FLOOR["lidar"], rng)[None]
    return ModalitySample("", rasters, label)


SPLITS = ("train", "val", "test")


def gen_synthetic(root, seed: int, count: int, classes: int, height: int,
                  width: int, modalities) -> dict:
    """Write a deterministic dataset tree under ``root``.

    The validation and test splits hold a quarter of ``count`` each (at
    least one sample). Every byte is a pure function of the arguments.
    """
    if count < 1:
        raise DataError("count must be at least 1")
    if classes < 2:
        raise DataError("need at least two classes (background + 1)")
    modalities = list(modalities)
    root = Path(root)
    counts = {"train": count, "val": max(1, count // 4), "test": max(1, count // 4)}
    for split_idx, split in enumerate(SPLITS):
        for i in range(counts[split]):
            rng = np.random.default_rng([seed, split_idx, i])
            sample = _render_sample(rng, classes, height, width, modalities)
            sdir = root / split / f"{i:05d}"
            sdir.mkdir(parents=True, exist_ok=True)
            for name, raster in sample.modalities.items():
                write_tensor(sdir / f"{name}.mmt", raster)
            write_tensor(sdir / "label.mmt", sample.label)
    manifest = {
        "format_version": 1,
        "seed": seed,
        "classes": classes,
        "height": height,
        "width": width,
        "modalities": ",".join(modalities),
        "train_count": counts["train"],
        "val_count": counts["val"],
        "test_count": counts["test"],
    }
    lines = [f"{k} = {v}" for k, v in manifest.items()]
    (root / "manifest").write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest"
    if not path.is_file():
        raise DataError(f"no manifest under {root}")
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"malformed manifest line: {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    for key in ("classes", "height", "width", "seed",
                "train_count", "val_count", "test_count", "format_version"):
        if key in out:
            out[key] = int(out[key])
    if "modalities" in out:
        out["modalities"] = [m for m in out["modalities"].split(",") if m]
    return out


def load_split(root, split: str) -> list[ModalitySample]:
    base = Path(root) / split
    if not base.is_dir():
        raise DataError(f"split directory {base} does not exist")
    samples = []
    for sdir in sorted(p for p in base.iterdir() if p.is_dir()):
        rasters = {}
        for f in sorted(sdir.glob("*.mmt")):
            if f.stem == "label":
                continue
            rasters[f.stem] = read_tensor(f).astype(np.float32)
        label = read_tensor(sdir / "label.mmt")
        samples.append(ModalitySample(sdir.name, rasters, label.astype(np.uint8)))
    if not samples:
        raise DataError(f"split {split!r} under {root} is empty")
    return samples


# -- augmentation --------------------------------------------------------------

def _gauss_kernel(sigma: float, taps: int = 5) -> np.ndarray:
    half = taps // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (half, half)
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for j, kj in enumerate(kernel):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(j, j + img.shape[axis])
        out += kj * padded[tuple(sl)]
    return out


def gaussian_blur(raster: np.ndarray, sigma: float) -> np.ndarray:
    k = _gauss_kernel(sigma)
    out = _blur_axis(raster.astype(np.float64), k, axis=-2)
    out = _blur_axis(out, k, axis=-1)
    return out.astype(np.float32)


def augment(sample: ModalitySample, seed: int, crop_hw=None,
            jitter: bool = True, blur: bool = True,
            force_flip: bool | None = None) -> ModalitySample:
    """Seeded joint augmentation: horizontal flip (all rasters + label),
    color jitter (3-channel rasters), blur (dense rasters), random crop
    (identical geometry everywhere). Labels only ever move, never blend."""
    rng = np.random.default_rng(seed)
    out = sample.copy()
    h, w = out.spatial()

    flip = force_flip if force_flip is not None else bool(rng.random() < 0.5)
    if flip:
        out.label = out.label[:, ::-1].copy()
        for name in out.modalities:
            out.modalities[name] = out.modalities[name][:, :, ::-1].copy()

    for name in sorted(out.modalities):
        raster = out.modalities[name]
        if jitter and raster.shape[0] == 3:
            scale = rng.uniform(0.8, 1.2, 3).astype(np.float32)
            shift = rng.uniform(-15.0, 15.0, 3).astype(np.float32)
            raster = np.clip(raster * scale[:, None, None] + shift[:, None, None],
                             0.0, 255.0)
        kind = MODALITY_INFO.get(name, (raster.shape[0], "dense"))[1]
        if blur and kind == "dense":
            raster = np.clip(gaussian_blur(raster, float(rng.uniform(0.4, 1.1))),
                             0.0, 255.0)
        out.modalities[name] = raster.astype(np.float32)

    if crop_hw is not None:
        ch, cw = crop_hw
        if ch > h or cw > w:
            raise DataError(f"crop {ch}x{cw} larger than image {h}x{w}")
        if (ch, cw) != (h, w):
            oy = int(rng.integers(0, h - ch + 1))
            ox = int(rng.integers(0, w - cw + 1))
            out.label = out.label[oy:oy + ch, ox:ox + cw].copy()
            for name in out.modalities:
                out.modalities[name] = out.modalities[name][:, oy:oy + ch,
                                                            ox:ox + cw].copy()
    return out
