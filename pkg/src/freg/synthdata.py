"""Procedural footprint corpus.

Each sample is a triple: an ideal rectilinear footprint mask y (union of
1-3 overlapping rectangles under a common rotation), a degraded input mask x
(boundary jitter, corner-rounding smoothing, blob noise) standing in for an
instance-segmentation prediction, and a rendered intensity image z whose
roof/ground edge coincides with the ideal boundary. Degradation is bounded:
every pair keeps IoU(x at 0.5, y) >= 0.5.

Everything is a pure function of (spec, seed); datasets regenerate
bit-identically from their manifest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


class DegradationError(RuntimeError):
    """Degradation could not satisfy the IoU floor within the retry budget."""


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenSpec:
    image_size: int = 64
    rect_min: int = 1
    rect_max: int = 3
    rot_max_deg: float = 45.0
    fill_min: float = 0.2
    fill_max: float = 0.6
    jitter_sigma: float = 1.0
    blob_count: int = 2
    blob_radius: float = 3.0
    smooth_size: int = 3
    roof: tuple = (0.78, 0.72, 0.68)
    ground: tuple = (0.30, 0.38, 0.30)
    texture_contrast: float = 0.06
    noise_sigma: float = 0.02
    iou_floor: float = 0.5

    def to_manifest(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f"spec.{f.name}"] = ",".join(repr(c) for c in v) if isinstance(v, tuple) else repr(v)
        return out

    @classmethod
    def from_manifest(cls, manifest: dict) -> "GenSpec":
        kwargs = {}
        for f in fields(cls):
            raw = manifest[f"spec.{f.name}"]
            if f.name in ("roof", "ground"):
                kwargs[f.name] = tuple(float(c) for c in raw.split(","))
            elif f.type == "int":
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        return cls(**kwargs)


@dataclass
class SampleTriple:
    x: np.ndarray   # (1,H,W) float32 in [0,1]
    z: np.ndarray   # (3,H,W) float32 in [0,1]
    y: np.ndarray   # (1,H,W) float32 binary


def _binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def quantize(arr: np.ndarray) -> np.ndarray:
    """Exact 8-bit quantization: round(v * 255)."""
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# geometry


def rect_quad(x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
    """Axis-aligned rectangle corners, counterclockwise, in (x, y)."""
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], np.float64)


def rotate_quads(quads, angle_deg: float, center) -> list:
    t = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    c = np.asarray(center, np.float64)
    return [(q - c) @ rot.T + c for q in quads]


def rasterize_quads(quads, size: int) -> np.ndarray:
    """Union membership of pixel centers in (possibly rotated) rectangles."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    mask = np.zeros((size, size), bool)
    for q in quads:
        cx, cy = q.mean(axis=0)
        ex = q[1] - q[0]     # first edge
        ey = q[3] - q[0]     # adjacent edge
        hw = np.linalg.norm(ex) / 2.0
        hh = np.linalg.norm(ey) / 2.0
        ux, uy = ex / (2.0 * hw), ey / (2.0 * hh)
        rx = (px - cx) * ux[0] + (py - cy) * ux[1]
        ry = (px - cx) * uy[0] + (py - cy) * uy[1]
        mask |= (np.abs(rx) <= hw) & (np.abs(ry) <= hh)
    return mask.astype(np.float32)


def gen_ideal_mask(spec: GenSpec, seed) -> tuple:
    """Rasterized single-component footprint plus its rectangle corner list."""
    rng = np.random.default_rng(seed)
    size = spec.image_size
    for _ in range(64):
        target_fill = rng.uniform(spec.fill_min, spec.fill_max)
        n_rect = int(rng.integers(spec.rect_min, spec.rect_max + 1))
        area = target_fill * size * size / (0.6 + 0.4 * n_rect)
        aspect = rng.uniform(0.5, 2.0)
        w = int(np.clip(np.sqrt(area * aspect), 4, 0.86 * size))
        h = int(np.clip(area / max(w, 1), 4, 0.86 * size))
        margin = max(2, size // 12)
        x0 = int(rng.integers(margin, max(margin + 1, size - margin - w)))
        y0 = int(rng.integers(margin, max(margin + 1, size - margin - h)))
        quads = [rect_quad(x0, y0, x0 + w, y0 + h)]
        for _ in range(n_rect - 1):
            base = quads[int(rng.integers(0, len(quads)))]
            bx0, by0 = base.min(axis=0)
            bx1, by1 = base.max(axis=0)
            cw = int(rng.integers(4, max(5, int(0.7 * w) + 1)))
            ch = int(rng.integers(4, max(5, int(0.7 * h) + 1)))
            cx = rng.uniform(bx0, bx1)     # center inside an existing rect
            cy = rng.uniform(by0, by1)     # guarantees overlap, keeps one component
            nx0 = int(np.clip(cx - cw / 2, 1, size - cw - 1))
            ny0 = int(np.clip(cy - ch / 2, 1, size - ch - 1))
            quads.append(rect_quad(nx0, ny0, nx0 + cw, ny0 + ch))
        angle = rng.uniform(0.0, spec.rot_max_deg)
        rotated = rotate_quads(quads, angle, (size / 2.0, size / 2.0))
        mask = rasterize_quads(rotated, size)
        fill = mask.mean(dtype=np.float64)
        if not (spec.fill_min <= fill <= spec.fill_max):
            continue
        _, n_comp = ndimage.label(mask > 0.5)
        if n_comp != 1:
            continue
        return mask, rotated
    raise DatasetError("could not sample a footprint satisfying the fill-ratio bounds")


# ---------------------------------------------------------------------------
# degradation and rendering


def _smooth_field(rng, size: int, grid: int) -> np.ndarray:
    """Low-frequency unit-scale noise: coarse normal grid, bilinear upsampled."""
    coarse = rng.normal(0.0, 1.0, (grid, grid))
    return ndimage.zoom(coarse, size / grid, order=1, mode="nearest", grid_mode=True)


def _degrade_once(ideal: np.ndarray, spec: GenSpec, rng) -> np.ndarray:
    size = ideal.shape[0]
    out = ideal.astype(np.float32)

    if spec.jitter_sigma > 0:
        dy = _smooth_field(rng, size, 5) * spec.jitter_sigma
        dx = _smooth_field(rng, size, 5) * spec.jitter_sigma
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        out = ndimage.map_coordinates(out, [ys + dy, xs + dx], order=0, mode="nearest")

    binary = out > 0.5
    if spec.blob_count > 0:
        ys, xs = np.mgrid[0:size, 0:size]
        near = ndimage.binary_dilation(binary, iterations=2)
        shell_out = np.argwhere(near & ~binary)
        inner = ndimage.binary_erosion(binary, iterations=1)
        shell_in = np.argwhere(binary & ~ndimage.binary_erosion(inner, iterations=1))
        for add in (True, False):
            shell = shell_out if add else shell_in
            if shell.size == 0:
                continue
            for _ in range(spec.blob_count):
                cy, cx = shell[int(rng.integers(0, shell.shape[0]))]
                r = spec.blob_radius * rng.uniform(0.5, 1.0)
                disk = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
                binary = binary | disk if add else binary & ~disk

    out = binary.astype(np.float32)
    if spec.smooth_size > 1:
        out = ndimage.uniform_filter(out, size=spec.smooth_size)
        out = (out >= 0.5).astype(np.float32)        # rounds convex corners
        out = ndimage.uniform_filter(out, size=spec.smooth_size)
    return np.clip(out, 0.0, 1.0)


def degrade_mask(ideal: np.ndarray, spec: GenSpec, seed) -> np.ndarray:
    """Bounded degradation of a binary mask; output in [0, 1] with
    IoU(quantized x at 0.5, ideal) >= spec.iou_floor, resampling up to 10
    times before giving up."""
    ideal2d = np.asarray(ideal, np.float32).reshape(ideal.shape[-2], ideal.shape[-1])
    if not np.all((ideal2d == 0.0) | (ideal2d == 1.0)):
        raise ValueError("degrade_mask expects a binary ideal mask")
    attempts = np.random.SeedSequence(seed).spawn(10)
    for child in attempts:
        rng = np.random.default_rng(child)
        out = _degrade_once(ideal2d, spec, rng)
        got = quantize(out) >= 128         # matches a 0.5 threshold after PNG round-trip
        if _binary_iou(got, ideal2d > 0.5) >= spec.iou_floor:
            return out
    raise DegradationError(f"IoU floor {spec.iou_floor} unreachable in 10 attempts")


def render_image(ideal: np.ndarray, spec: GenSpec, seed) -> np.ndarray:
    """Roof color inside the footprint, textured ground outside, plus noise.
    The intensity edge coincides with the ideal boundary."""
    rng = np.random.default_rng(seed)
    ideal2d = np.asarray(ideal, np.float32).reshape(ideal.shape[-2], ideal.shape[-1])
    size = ideal2d.shape[0]
    img = np.empty((3, *ideal2d.shape), np.float32)
    for c in range(3):
        img[c] = np.where(ideal2d > 0.5, spec.roof[c], spec.ground[c])
    if spec.texture_contrast > 0:
        field = _smooth_field(rng, size, 6)
        img += (spec.texture_contrast * field * (ideal2d <= 0.5)).astype(np.float32)
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_triple(spec: GenSpec, sample_seeds) -> SampleTriple:
    gen_seed, degrade_seed, render_seed = sample_seeds
    y, _ = gen_ideal_mask(spec, gen_seed)
    x = degrade_mask(y, spec, degrade_seed)
    z = render_image(y, spec, render_seed)
    return SampleTriple(x=x[None], z=z, y=y[None])


# ---------------------------------------------------------------------------
# PNG persistence


def save_png(path, arr: np.ndarray) -> None:
    """8-bit PNG; grayscale for (H,W)/(1,H,W), RGB for (3,H,W)."""
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    q = quantize(a)
    if q.ndim == 3:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        Image.fromarray(q, mode="L").save(path)


def load_png(path) -> np.ndarray:
    """Float32 array in [0,1]: (1,H,W) for grayscale, (3,H,W) for RGB."""
    with Image.open(path) as img:
        a = np.asarray(img, np.float32) / 255.0
    if a.ndim == 2:
        return a[None]
    return np.ascontiguousarray(a.transpose(2, 0, 1)[:3])


def _sample_seeds(master_seed: int, count: int):
    """Three derived integer seeds per sample: generation, degradation, render."""
    children = np.random.SeedSequence(master_seed).spawn(count)
    return [tuple(int(v) for v in child.generate_state(3)) for child in children]


def split_sizes(count: int) -> tuple:
    n_val = count // 10
    n_test = count // 10
    return count - n_val - n_test, n_val, n_test


def build_dataset(count: int, spec: GenSpec, seed: int, out_dir) -> Path:
    """Write PNG triples plus a manifest with spec echo and checksums.
    Index split: first 80% train, next 10% validation, last 10% test."""
    if count < 1:
        raise DatasetError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = {"format": "freg-dataset-1", "count": str(count), "seed": str(seed)}
    lines.update(spec.to_manifest())
    n_train, n_val, n_test = split_sizes(count)
    lines.update({"split.train": str(n_train), "split.val": str(n_val),
                  "split.test": str(n_test)})
    checksums = {}
    for i, seeds in enumerate(_sample_seeds(seed, count)):
        triple = make_triple(spec, seeds)
        for suffix, arr in (("x", triple.x), ("z", triple.z), ("y", triple.y)):
            name = f"sample_{i:05d}_{suffix}.png"
            save_png(out / name, arr)
            checksums[f"checksum.{name}"] = hashlib.sha256((out / name).read_bytes()).hexdigest()
    lines.update(checksums)
    manifest = "".join(f"{k} = {v}\n" for k, v in lines.items())
    (out / "manifest.txt").write_text(manifest)
    return out


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.txt"
    if not path.exists():
        raise DatasetError(f"no manifest in {dataset_dir}")
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


@dataclass
class FootprintDataset:
    x: np.ndarray        # (N,1,H,W)
    z: np.ndarray        # (N,3,H,W)
    y: np.ndarray        # (N,1,H,W)
    manifest: dict
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def indices(self, split: str) -> np.ndarray:
        try:
            return {"train": self.train_idx, "val": self.val_idx,
                    "test": self.test_idx, "all": np.arange(len(self))}[split]
        except KeyError:
            raise DatasetError(f"unknown split {split!r}") from None


def load_dataset(dataset_dir, verify: bool = True) -> FootprintDataset:
    """Load all triples; optionally verify every PNG checksum."""
    out = Path(dataset_dir)
    manifest = read_manifest(out)
    count = int(manifest["count"])
    xs, zs, ys = [], [], []
    for i in range(count):
        arrays = {}
        for suffix in ("x", "z", "y"):
            name = f"sample_{i:05d}_{suffix}.png"
            path = out / name
            if not path.exists():
                raise DatasetError(f"missing {name}")
            if verify:
                digest = hashlib.sha256(path.read_bytes()).hexdigest()
                if digest != manifest.get(f"checksum.{name}"):
                    raise DatasetError(f"checksum mismatch for {name}")
            arrays[suffix] = load_png(path)
        xs.append(arrays["x"])
        zs.append(arrays["z"])
        ys.append(arrays["y"])
    n_train, n_val, n_test = (int(manifest[f"split.{k}"]) for k in ("train", "val", "test"))
    idx = np.arange(count)
    return FootprintDataset(
        x=np.stack(xs), z=np.stack(zs), y=np.stack(ys), manifest=manifest,
        train_idx=idx[:n_train], val_idx=idx[n_train:n_train + n_val],
        test_idx=idx[n_train + n_val:])
