"""Seeded synthetic benchmarks and inference-time perturbations.

Determinism: every draw comes from a counter-based Philox (4x64) generator
keyed by ``(seed, stream)``, where the stream word identifies the purpose
(shape placement, center patch, each perturbation kind).  Identical
``(seed, size)`` therefore reproduce samples bit-for-bit, independently of
call order or platform word size.

Tasks:

* ``synthshape`` -- 2..6 non-overlapping colored primitives (circle, square,
  triangle, cross, star) on black; the mask labels each primitive's pixels
  with its class id (1..5), background 0.
* ``halligalli`` -- four shapes from a 3-type vocabulary in the corners, with
  exactly one type appearing exactly twice; a neutral gray center patch
  carries no class signal.  The label is the doubled type (0..2).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
import json
import struct

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

MASK64 = 2**64 - 1

STREAM_SYNTH = 0x5348  # shape placement draws
STREAM_PATCH = 0x5054  # halligalli center patch
STREAM_NOISE = 0x4E4F
STREAM_DISTORT = 0x4453
STREAM_COMBINED = 0x434D

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "star")

BASE_COLORS = np.array([
    [0.85, 0.15, 0.15],   # circle
    [0.15, 0.80, 0.20],   # square
    [0.20, 0.30, 0.90],   # triangle
    [0.90, 0.85, 0.15],   # cross
    [0.85, 0.20, 0.85],   # star
])
COLOR_JITTER = 0.10

PERTURBATION_KINDS = ("rescale", "rotate", "translate", "distort", "noise")

# Severity tiers used by the robustness grid; tier i of "combined" applies
# the i-th level of every kind in the order rescale, rotate, translate,
# distort, noise.
SEVERITY_LEVELS = {
    "rescale": (0.75, 1.0, 1.5),
    "rotate": (15.0, 30.0, 45.0),
    "translate": (0.10, 0.20, 0.30),
    "distort": (2.0, 4.0, 6.0),
    "noise": (0.1, 0.2, 0.3),
}


def task_rng(seed: int, stream: int) -> np.random.Generator:
    """Philox generator keyed by (seed, stream)."""
    return np.random.Generator(np.random.Philox(key=[seed & MASK64, stream & MASK64]))


@dataclass
class TaskSample:
    """Image plus target: a segmentation mask or a class label."""

    image: np.ndarray
    target: np.ndarray | int
    seed: int
    kind: str
    shapes: tuple = ()


@dataclass(frozen=True)
class Perturbation:
    kind: str
    level: float

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise InvalidArgumentError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "rescale" and not self.level > 0:
            raise InvalidArgumentError("rescale level must be positive")
        if self.kind == "translate" and not 0.0 <= self.level < 1.0:
            raise InvalidArgumentError("translate level must lie in [0, 1)")
        if self.kind in ("distort", "noise") and self.level < 0:
            raise InvalidArgumentError(f"{self.kind} level must be non-negative")


# ---------------------------------------------------------------------------
# Rasterization

def _pixel_grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return ys, xs


def _polygon_mask(size: int, xs_v, ys_v) -> np.ndarray:
    """Even-odd fill of a simple polygon over pixel centers."""
    ys, xs = _pixel_grid(size)
    inside = np.zeros((size, size), dtype=bool)
    n = len(xs_v)
    j = n - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(n):
            crosses = (ys_v[i] > ys) != (ys_v[j] > ys)
            x_at = (xs_v[j] - xs_v[i]) * (ys - ys_v[i]) / (ys_v[j] - ys_v[i]) + xs_v[i]
            inside ^= crosses & (xs < x_at)
            j = i
    return inside


def rasterize_shape(record: tuple, size: int) -> np.ndarray:
    """Boolean pixel set of a recorded shape; the mask ground truth per shape."""
    name = record[0]
    ys, xs = _pixel_grid(size)
    if name == "circle":
        _, _, cx, cy, r = record
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if name == "square":
        _, _, cx, cy, h = record
        return (np.abs(xs - cx) <= h) & (np.abs(ys - cy) <= h)
    if name == "triangle":
        _, _, cx, cy, r, angle = record
        angles = angle + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
        return _polygon_mask(size, cx + r * np.cos(angles), cy + r * np.sin(angles))
    if name == "cross":
        _, _, cx, cy, r, w = record
        horiz = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= w)
        vert = (np.abs(xs - cx) <= w) & (np.abs(ys - cy) <= r)
        return horiz | vert
    if name == "star":
        _, _, cx, cy, r_out, r_in, angle = record
        angles = angle + np.arange(10) * (np.pi / 5.0)
        radii = np.where(np.arange(10) % 2 == 0, r_out, r_in)
        return _polygon_mask(size, cx + radii * np.cos(angles), cy + radii * np.sin(angles))
    raise InvalidArgumentError(f"unknown shape record {name!r}")


def _make_record(cls: int, cx: float, cy: float, scale: float, angle: float) -> tuple:
    name = SHAPE_NAMES[cls - 1]
    if name == "circle":
        return (name, cls, cx, cy, scale)
    if name == "square":
        return (name, cls, cx, cy, scale * 0.85)
    if name == "triangle":
        return (name, cls, cx, cy, scale * 1.15, angle)
    if name == "cross":
        return (name, cls, cx, cy, scale * 1.1, scale * 0.35)
    return (name, cls, cx, cy, scale * 1.25, scale * 0.55, angle)


# ---------------------------------------------------------------------------
# Generators

def gen_synthshape(seed: int, size: int = 32) -> TaskSample:
    """Non-overlapping colored primitives with a per-pixel class mask."""
    if size < 16:
        raise InvalidArgumentError("synthshape size must be >= 16")
    rng = task_rng(seed, STREAM_SYNTH)
    n_shapes = int(rng.integers(2, 7))
    image = np.zeros((3, size, size))
    mask = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    records = []
    for _ in range(n_shapes):
        cls = int(rng.integers(1, 6))
        color = np.clip(BASE_COLORS[cls - 1] + COLOR_JITTER * rng.standard_normal(3),
                        0.0, 1.0)
        for _ in range(40):
            scale = float(rng.uniform(0.09, 0.16) * size)
            angle = float(rng.uniform(0.0, 2.0 * np.pi))
            lo, hi = scale + 1.0, size - 2.0 - scale
            if hi <= lo:
                continue
            cx = float(rng.uniform(lo, hi))
            cy = float(rng.uniform(lo, hi))
            record = _make_record(cls, cx, cy, scale, angle)
            pixels = rasterize_shape(record, size)
            if pixels.sum() < 4 or np.any(pixels & occupied):
                continue
            occupied |= pixels
            mask[pixels] = cls
            image[:, pixels] = color[:, None]
            records.append(record)
            break
    return TaskSample(image=image, target=mask, seed=seed, kind="synthshape",
                      shapes=tuple(records))


HALLIGALLI_VOCAB = (1, 2, 3)  # circle, square, triangle


def gen_halligalli(seed: int, size: int = 32) -> TaskSample:
    """Corner-matching task: label = the shape type appearing exactly twice."""
    if size < 32:
        raise InvalidArgumentError("halligalli size must be >= 32")
    rng = task_rng(seed, STREAM_SYNTH)
    label = int(rng.integers(0, 3))
    pair_cls = HALLIGALLI_VOCAB[label]
    corners_order = rng.permutation(4)
    others = [c for i, c in enumerate(HALLIGALLI_VOCAB) if i != label]
    if rng.random() < 0.5:
        others = others[::-1]
    corner_cls = [0, 0, 0, 0]
    corner_cls[corners_order[0]] = pair_cls
    corner_cls[corners_order[1]] = pair_cls
    corner_cls[corners_order[2]] = others[0]
    corner_cls[corners_order[3]] = others[1]

    q = size / 4.0
    centers = [(q, q), (3 * q, q), (q, 3 * q), (3 * q, 3 * q)]
    image = np.zeros((3, size, size))
    records = []
    for idx in range(4):
        cls = corner_cls[idx]
        cx0, cy0 = centers[idx]
        cx = cx0 + float(rng.uniform(-0.03, 0.03) * size)
        cy = cy0 + float(rng.uniform(-0.03, 0.03) * size)
        scale = float(size * 0.13 * (1.0 + rng.uniform(-0.1, 0.1)))
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        color = np.clip(BASE_COLORS[cls - 1] + 0.08 * rng.standard_normal(3), 0.0, 1.0)
        record = _make_record(cls, cx, cy, scale, angle)
        pixels = rasterize_shape(record, size)
        image[:, pixels] = color[:, None]
        records.append(record)

    # Neutral center patch from an independent stream: its content carries no
    # information about the corner configuration.
    patch_rng = task_rng(seed, STREAM_PATCH)
    gray = float(patch_rng.uniform(0.35, 0.65))
    side = size // 4
    start = (size - side) // 2
    image[:, start:start + side, start:start + side] = gray
    return TaskSample(image=image, target=label, seed=seed, kind="halligalli",
                      shapes=tuple(records))


# ---------------------------------------------------------------------------
# Resampling primitives

def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (C,H,W) at float coords with zero fill outside the frame."""
    h, w = img.shape[-2:]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0
    out = np.zeros(img.shape[:-2] + ys.shape)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        weight = (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx)
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        out += img[..., yc, xc] * (weight * valid)
    return out


def _nearest_sample(mask: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    yy = np.rint(ys).astype(np.int64)
    xx = np.rint(xs).astype(np.int64)
    valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    out = np.zeros(ys.shape, dtype=mask.dtype)
    out[valid] = mask[yy[valid], xx[valid]]
    return out


def _resize_coords(n_out: int, n_in: int) -> np.ndarray:
    # Pixel-center (align_corners=False) mapping, clamped to the frame.
    coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(coords, 0.0, n_in - 1.0)


def _resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    ys = _resize_coords(out_hw[0], img.shape[-2])
    xs = _resize_coords(out_hw[1], img.shape[-1])
    yg, xg = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(img, yg, xg)


def _resize_nearest(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    ys = _resize_coords(out_hw[0], mask.shape[0])
    xs = _resize_coords(out_hw[1], mask.shape[1])
    yg, xg = np.meshgrid(ys, xs, indexing="ij")
    return _nearest_sample(mask, yg, xg)


# ---------------------------------------------------------------------------
# Perturbations

def apply_perturbation(sample: TaskSample, p: Perturbation, seed: int = 0) -> TaskSample:
    """Transformed copy of a sample; masks move with the image (nearest)."""
    image = np.asarray(sample.image, dtype=np.float64)
    is_mask = not np.isscalar(sample.target) and np.asarray(sample.target).ndim > 0
    mask = np.asarray(sample.target) if is_mask else None
    h, w = image.shape[-2:]

    if p.kind == "rescale":
        if p.level == 1.0:
            new_image, new_mask = image.copy(), None if mask is None else mask.copy()
        else:
            hw2 = (max(1, round(p.level * h)), max(1, round(p.level * w)))
            new_image = _resize_bilinear(_resize_bilinear(image, hw2), (h, w))
            if mask is not None:
                new_mask = _resize_nearest(_resize_nearest(mask, hw2), (h, w))
    elif p.kind == "rotate":
        theta = np.deg2rad(p.level)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yg, xg = _pixel_grid(h)
        dy, dx = yg - cy, xg - cx
        src_y = cy + np.cos(theta) * dy - np.sin(theta) * dx
        src_x = cx + np.sin(theta) * dy + np.cos(theta) * dx
        new_image = _bilinear_sample(image, src_y, src_x)
        if mask is not None:
            new_mask = _nearest_sample(mask, src_y, src_x)
    elif p.kind == "translate":
        sy, sx = int(p.level * h), int(p.level * w)
        new_image = np.zeros_like(image)
        new_image[..., sy:, sx:] = image[..., : h - sy, : w - sx]
        if mask is not None:
            new_mask = np.zeros_like(mask)
            new_mask[sy:, sx:] = mask[: h - sy, : w - sx]
    elif p.kind == "distort":
        rng = task_rng(seed, STREAM_DISTORT)
        control = rng.normal(0.0, p.level, size=(2, 4, 4))
        disp = np.stack([
            ndimage.zoom(control[i], (h / 4.0, w / 4.0), order=3,
                         grid_mode=True, mode="grid-constant")
            for i in range(2)
        ])
        yg, xg = _pixel_grid(h)
        src_y, src_x = yg + disp[0], xg + disp[1]
        new_image = _bilinear_sample(image, src_y, src_x)
        if mask is not None:
            new_mask = _nearest_sample(mask, src_y, src_x)
    elif p.kind == "noise":
        if p.level == 0.0:
            new_image = image.copy()
        else:
            rng = task_rng(seed, STREAM_NOISE)
            new_image = np.clip(image + rng.normal(0.0, p.level, size=image.shape),
                                0.0, 1.0)
        new_mask = None if mask is None else mask.copy()
    else:  # unreachable: Perturbation validates kind
        raise InvalidArgumentError(f"unknown perturbation kind {p.kind!r}")

    target = new_mask if mask is not None else sample.target
    return replace(sample, image=new_image, target=target, shapes=())


def apply_combined(sample: TaskSample, tier: int, seed: int = 0) -> TaskSample:
    """All five perturbations at matched severity, in the fixed grid order."""
    if tier not in (0, 1, 2):
        raise InvalidArgumentError("tier must be 0, 1, or 2")
    out = sample
    for step, kind in enumerate(PERTURBATION_KINDS):
        p = Perturbation(kind, SEVERITY_LEVELS[kind][tier])
        out = apply_perturbation(out, p, seed=(seed + step * 0x10001) & MASK64)
    return out


# ---------------------------------------------------------------------------
# Sample files

MAGIC = b"SNCSMP01"
_KIND_CODES = {"synthshape": 0, "halligalli": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def write_sample(sample: TaskSample, path) -> None:
    """Flat binary: magic, shape header, float32 image, int32 target."""
    image = np.asarray(sample.image, dtype="<f4")
    is_mask = not np.isscalar(sample.target) and np.asarray(sample.target).ndim > 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        c, h, w = image.shape
        fh.write(struct.pack("<IIIIII", 1, _KIND_CODES[sample.kind],
                             0 if is_mask else 1, c, h, w))
        fh.write(struct.pack("<Q", sample.seed & MASK64))
        fh.write(image.tobytes())
        if is_mask:
            fh.write(np.asarray(sample.target, dtype="<i4").tobytes())
        else:
            fh.write(struct.pack("<i", int(sample.target)))


def read_sample(path) -> TaskSample:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise InvalidArgumentError(f"{path}: not a sample file")
        version, kind_code, target_kind, c, h, w = struct.unpack("<IIIIII", fh.read(24))
        if version != 1:
            raise InvalidArgumentError(f"{path}: unsupported version {version}")
        (seed,) = struct.unpack("<Q", fh.read(8))
        image = np.frombuffer(fh.read(4 * c * h * w), dtype="<f4").reshape(c, h, w)
        if target_kind == 0:
            target = np.frombuffer(fh.read(4 * h * w), dtype="<i4").reshape(h, w)
            target = target.astype(np.int64)
        else:
            (target,) = struct.unpack("<i", fh.read(4))
    return TaskSample(image=image.astype(np.float64), target=target, seed=seed,
                      kind=_KIND_NAMES[kind_code])


def export_png(sample: TaskSample, path) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(sample.image) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def export_pgm(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    scaled = np.clip(mask * 51, 0, 255).astype(np.uint8)  # labels 0..5 -> visible grays
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (mask.shape[1], mask.shape[0]))
        fh.write(scaled.tobytes())


def write_dataset(out_dir, kind: str, seed_start: int, count: int, size: int,
                  png: bool = False) -> dict:
    """Generate sequential-seed samples plus a sidecar manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = gen_synthshape if kind == "synthshape" else gen_halligalli
    files = []
    for j in range(count):
        sample = gen(seed_start + j, size)
        name = f"{kind}_{seed_start + j:08d}.bin"
        write_sample(sample, out / name)
        entry = {"file": name, "seed": seed_start + j}
        if png:
            png_name = name.replace(".bin", ".png")
            export_png(sample, out / png_name)
            entry["png"] = png_name
            if sample.kind == "synthshape":
                pgm_name = name.replace(".bin", ".pgm")
                export_pgm(sample.target, out / pgm_name)
                entry["pgm"] = pgm_name
        files.append(entry)
    manifest = {
        "kind": kind, "size": size, "count": count, "seed_start": seed_start,
        "format": {
            "magic": MAGIC.decode(), "header":
                "u32: version, kind(0=synthshape,1=halligalli), target(0=mask,1=label), "
                "channels, height, width; u64 seed; then little-endian float32 image "
                "(C*H*W) and int32 mask (H*W) or single int32 label",
        },
        "files": files,
    }
    with open(out / "dataset.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest
