"""Procedural multi-domain segmentation benchmark and dataset file I/O.

Scenes are a background plus a handful of colored shape instances; labels are
exact rasterizations. Geometry (and therefore labels) is driven by a separate
RNG stream from the photometric pass, so palettes and domain shifts never
perturb labels. Images go to disk as binary PPM, labels as binary PGM.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mscada.tensor import IGNORE_LABEL

CLASS_NAMES = ("ground", "block", "disk", "band", "patch", "grain")

BASE_COLORS = (
    (0.45, 0.45, 0.45),
    (0.85, 0.20, 0.20),
    (0.15, 0.75, 0.25),
    (0.15, 0.30, 0.85),
    (0.85, 0.80, 0.15),
    (0.80, 0.15, 0.80),
)

IDENTITY3 = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
SWAP_RG = ((0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0))
SWAP_GB = ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0))


class ParseError(ValueError):
    """Malformed netpbm content; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DomainSpec:
    name: str
    role: str                      # "source_1".."source_k" or "target"
    classes: tuple[int, ...]       # union-space ids present in this domain
    base_colors: tuple[tuple[float, float, float], ...]
    color_jitter: float
    texture: tuple[float, ...]     # per union class noise amplitude
    shift_matrix: tuple[tuple[float, float, float], ...]
    shift_bias: tuple[float, float, float]
    noise: float
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError(f"domain {self.name!r} needs at least 2 classes, got {self.classes}")
        if len(self.base_colors) != len(self.texture):
            raise ValueError("palette and texture tables must cover the same classes")
        if max(self.classes) >= len(self.base_colors):
            raise ValueError(f"class id {max(self.classes)} has no palette entry")


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    label: np.ndarray  # (H, W) int64


def _raster_geometry(spec: DomainSpec, rng: np.random.Generator
                     ) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Label map, instance-id map, and per-instance class list (labels depend
    only on this stream)."""
    h, w = spec.height, spec.width
    classes = sorted(spec.classes)
    background = classes[0]
    label = np.full((h, w), background, dtype=np.int64)
    instance = np.zeros((h, w), dtype=np.int64)
    inst_classes = [background]
    ys, xs = np.mgrid[0:h, 0:w]
    n_shapes = int(rng.integers(3, 9))
    for s in range(1, n_shapes + 1):
        cls = int(classes[rng.integers(len(classes))])
        kind = int(rng.integers(4))
        if kind == 0:  # rectangle
            rh = int(rng.integers(4, max(5, h // 2 + 1)))
            rw = int(rng.integers(4, max(5, w // 2 + 1)))
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            region = np.zeros((h, w), dtype=bool)
            region[top:top + rh, left:left + rw] = True
        elif kind == 1:  # disc
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            radius = rng.uniform(2.5, max(3.0, h / 4))
            region = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
        elif kind == 2:  # stripe
            theta = rng.uniform(0, math.pi)
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            thick = rng.uniform(1.5, 3.5)
            region = np.abs(math.cos(theta) * (xs - cx) + math.sin(theta) * (ys - cy)) <= thick
        else:  # blob: overlapping discs
            cy, cx = rng.uniform(4, h - 4), rng.uniform(4, w - 4)
            region = np.zeros((h, w), dtype=bool)
            for _ in range(3):
                oy, ox = rng.uniform(-3, 3), rng.uniform(-3, 3)
                radius = rng.uniform(2.0, 4.5)
                region |= (ys - cy - oy) ** 2 + (xs - cx - ox) ** 2 <= radius ** 2
        label[region] = cls
        instance[region] = s
        inst_classes.append(cls)
    return label, instance, inst_classes


def _render_photometric(spec: DomainSpec, label: np.ndarray, instance: np.ndarray,
                        inst_classes: list[int], rng: np.random.Generator) -> np.ndarray:
    h, w = label.shape
    colors = np.asarray(spec.base_colors)
    img = np.zeros((3, h, w))
    for s, cls in enumerate(inst_classes):
        tint = colors[cls] + spec.color_jitter * rng.uniform(-1, 1, size=3)
        mask = instance == s
        img[:, mask] = tint[:, None]
    amp = np.asarray(spec.texture)[label]
    img += amp[None] * rng.standard_normal((3, h, w))
    m = np.asarray(spec.shift_matrix)
    img = np.einsum("ij,jhw->ihw", m, img) + np.asarray(spec.shift_bias)[:, None, None]
    img += spec.noise * rng.standard_normal((3, h, w))
    return np.clip(img, 0.0, 1.0)


def generate_domain(spec: DomainSpec, n: int, seed: int) -> list[SceneSample]:
    """n scenes, deterministic in (spec, n, seed); per-sample RNG streams."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    samples = []
    for i in range(n):
        rng_geom = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, 0)))
        rng_photo = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, 1)))
        label, instance, inst_classes = _raster_geometry(spec, rng_geom)
        image = _render_photometric(spec, label, instance, inst_classes, rng_photo)
        samples.append(SceneSample(image, label))
    return samples


def _domain(name, role, classes, shift_matrix, shift_bias, noise, size):
    return DomainSpec(
        name=name, role=role, classes=tuple(sorted(classes)),
        base_colors=BASE_COLORS, color_jitter=0.04,
        texture=(0.02, 0.04, 0.04, 0.04, 0.04, 0.04),
        shift_matrix=shift_matrix, shift_bias=shift_bias, noise=noise,
        height=size, width=size)


def scenario_presets(name: str, size: int = 32) -> list[DomainSpec]:
    """Benchmark domain layouts for the class-asymmetry scenarios.

    equality2: two sources, each missing one distinct class, union == target.
    equality3: three sources, each missing one distinct class.
    inclusion2: the union carries one outlier class absent from the target.
    """
    union = set(range(6))
    if name == "equality2":
        layout = [("source_1", union - {4}), ("source_2", union - {5}),
                  ("target", union)]
    elif name == "equality3":
        layout = [("source_1", union - {3}), ("source_2", union - {4}),
                  ("source_3", union - {5}), ("target", union)]
    elif name == "inclusion2":
        layout = [("source_1", {0, 1, 2, 3}), ("source_2", {2, 3, 4, 5}),
                  ("target", {0, 1, 2, 3, 4})]
    else:
        raise ValueError(f"unknown scenario {name!r}; expected equality2, equality3 or inclusion2")
    shifts = {
        "source_1": (((1.05, 0.0, 0.0), (0.0, 0.95, 0.0), (0.0, 0.0, 1.0)),
                     (-0.02, 0.02, 0.0), 0.02),
        "source_2": (SWAP_RG, (0.0, 0.0, 0.03), 0.02),
        "source_3": (SWAP_GB, (0.03, 0.0, 0.0), 0.02),
        "target": (IDENTITY3, (0.02, 0.02, 0.02), 0.03),
    }
    specs = []
    for role, classes in layout:
        matrix, bias, noise = shifts[role]
        specs.append(_domain(f"{name}.{role}", role, classes, matrix, bias, noise, size))
    return specs


# -- netpbm I/O ---------------------------------------------------------------

def _write_netpbm(path, magic: bytes, raster: bytes, width: int, height: int) -> None:
    header = magic + b"\n" + f"{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raster)


def write_ppm(path, image_u8: np.ndarray) -> None:
    """(3, H, W) uint8 to binary P6."""
    c, h, w = image_u8.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    _write_netpbm(path, b"P6", image_u8.transpose(1, 2, 0).tobytes(), w, h)


def write_pgm(path, label_u8: np.ndarray) -> None:
    """(H, W) uint8 to binary P5 (class indices, 255 reserved for ignore)."""
    h, w = label_u8.shape
    _write_netpbm(path, b"P5", label_u8.tobytes(), w, h)


def _parse_netpbm(raw: bytes, expected_magic: bytes, channels: int) -> np.ndarray:
    pos = 0

    def next_token() -> tuple[bytes, int]:
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos:pos + 1]
            if ch == b"#":
                while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("unexpected end of header", start)
        return raw[start:pos], start

    magic, off = next_token()
    if magic != expected_magic:
        raise ParseError(f"bad magic {magic!r}, expected {expected_magic!r}", off)
    dims = []
    for field in ("width", "height", "maxval"):
        token, off = next_token()
        try:
            dims.append(int(token))
        except ValueError:
            raise ParseError(f"non-numeric {field} {token!r}", off) from None
    width, height, maxval = dims
    if width <= 0 or height <= 0:
        raise ParseError(f"bad dimensions {width}x{height}", off)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}, expected 255", off)
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError("missing whitespace before raster", pos)
    pos += 1
    expected = width * height * channels
    raster = raw[pos:]
    if len(raster) != expected:
        raise ParseError(f"raster has {len(raster)} bytes, expected {expected}", pos)
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)


def read_ppm(path) -> np.ndarray:
    arr = _parse_netpbm(Path(path).read_bytes(), b"P6", 3)
    return arr.transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1)[:, :, 0].copy()


# -- dataset layout -----------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def dequantize(image_u8: np.ndarray) -> np.ndarray:
    return image_u8.astype(np.float64) / 255.0


def write_dataset(root, spec: DomainSpec, samples: list[SceneSample]) -> None:
    """`<root>/<domain>/{images,labels}/<idx>.ppm|.pgm` plus manifest.json."""
    base = Path(root) / spec.name.split(".")[-1]
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "labels").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_ppm(base / "images" / f"{i:04d}.ppm", quantize(s.image))
        bad = (s.label < 0) | ((s.label >= IGNORE_LABEL) & (s.label != IGNORE_LABEL))
        if bad.any():
            raise ValueError(f"label value {int(s.label[bad].flat[0])} does not fit the 8-bit format")
        write_pgm(base / "labels" / f"{i:04d}.pgm", s.label.astype(np.uint8))
    manifest = {
        "name": spec.name,
        "role": spec.role,
        "classes": sorted(spec.classes),
        "class_names": [CLASS_NAMES[c] for c in sorted(spec.classes)],
        "num_samples": len(samples),
        "height": spec.height,
        "width": spec.width,
    }
    (base / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_manifest(root, domain: str) -> dict:
    return json.loads((Path(root) / domain / "manifest.json").read_text())


def read_images(root, domain: str) -> list[np.ndarray]:
    """Image-only read path; training on the target never sees labels."""
    base = Path(root) / domain
    manifest = read_manifest(root, domain)
    return [dequantize(read_ppm(base / "images" / f"{i:04d}.ppm"))
            for i in range(manifest["num_samples"])]


def read_dataset(root, domain: str) -> tuple[dict, list[SceneSample]]:
    """Images with labels, for supervised training and evaluation."""
    base = Path(root) / domain
    manifest = read_manifest(root, domain)
    samples = []
    for i in range(manifest["num_samples"]):
        image = dequantize(read_ppm(base / "images" / f"{i:04d}.ppm"))
        label = read_pgm(base / "labels" / f"{i:04d}.pgm").astype(np.int64)
        samples.append(SceneSample(image, label))
    return manifest, samples
