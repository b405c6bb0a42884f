"""Multi-source pseudo-label fusion, class filtering and strong transforms.

Pseudo-labels come from the EMA teacher on clean target images; the strong
transformation is applied to the student's input only, with its geometric
part replayed on labels and weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mscada.tensor import IGNORE_LABEL, InvalidLabelError, Tensor, log_softmax_data, no_grad

FUSION_STRATEGIES = ("confidence", "best_expert", "summation", "ensemble")


@dataclass(frozen=True)
class ClassRegistry:
    """Union class space, target subset, and the remap between them."""

    union_classes: tuple[int, ...]
    target_classes: tuple[int, ...]

    def __post_init__(self):
        union = tuple(sorted(self.union_classes))
        target = tuple(sorted(self.target_classes))
        object.__setattr__(self, "union_classes", union)
        object.__setattr__(self, "target_classes", target)
        if union != tuple(range(len(union))):
            raise ValueError(f"union classes must be 0..{len(union) - 1}, got {union}")
        if not set(target) <= set(union):
            raise ValueError(f"target classes {target} not a subset of union {union}")
        if not target:
            raise ValueError("target class set is empty")
        if IGNORE_LABEL < len(union):
            raise ValueError("union class space collides with the ignore value")

    @property
    def num_union(self) -> int:
        return len(self.union_classes)

    @property
    def num_target(self) -> int:
        return len(self.target_classes)

    @property
    def outliers(self) -> tuple[int, ...]:
        return tuple(c for c in self.union_classes if c not in set(self.target_classes))

    def filter_outliers(self, labels: np.ndarray) -> np.ndarray:
        """Union-space labels with outlier classes replaced by IGNORE_LABEL."""
        labels = np.asarray(labels)
        valid = labels != IGNORE_LABEL
        bad = valid & ((labels < 0) | (labels >= self.num_union))
        if bad.any():
            raise InvalidLabelError(
                f"label {int(labels[bad].flat[0])} outside union space of {self.num_union} classes")
        keep = np.isin(labels, self.target_classes)
        return np.where(keep, labels, IGNORE_LABEL).astype(np.int64)

    def to_target_space(self, labels: np.ndarray) -> np.ndarray:
        """Remap target-class values to dense indices 0..num_target-1."""
        labels = np.asarray(labels)
        lut = np.full(self.num_union + 1, -1, dtype=np.int64)
        for i, c in enumerate(self.target_classes):
            lut[c] = i
        out = np.full(labels.shape, IGNORE_LABEL, dtype=np.int64)
        valid = labels != IGNORE_LABEL
        bad = valid & ~np.isin(labels, self.target_classes)
        if bad.any():
            raise InvalidLabelError(
                f"label {int(labels[bad].flat[0])} is not a target class; filter outliers first")
        out[valid] = lut[labels[valid]]
        return out

    def from_target_space(self, labels: np.ndarray) -> np.ndarray:
        """Inverse of to_target_space (predictions back to union ids)."""
        labels = np.asarray(labels)
        lut = np.array(self.target_classes, dtype=np.int64)
        out = np.full(labels.shape, IGNORE_LABEL, dtype=np.int64)
        valid = labels != IGNORE_LABEL
        out[valid] = lut[labels[valid]]
        return out


def class_filter(fused: np.ndarray, registry: ClassRegistry) -> np.ndarray:
    """Keep target classes, assign IGNORE_LABEL to union outliers."""
    return registry.filter_outliers(fused)


def confidence_gate(confidence: np.ndarray, threshold: float = 0.968) -> np.ndarray:
    """Binary pixel weights: 1 where confidence strictly exceeds the threshold."""
    return (np.asarray(confidence) > threshold).astype(np.float64)


def fuse_predictions(logits: np.ndarray, strategy: str = "confidence"
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Fuse per-branch logits (k, B, C, H, W) into labels and confidences.

    confidence: per pixel, the branch with the largest maximum softmax
    probability wins (ties to the lower branch index) and contributes its
    argmax class and that probability. best_expert: one branch per sample,
    chosen by mean confidence. summation: softmax of summed logits.
    ensemble: average of branch softmax probabilities.
    """
    if strategy not in FUSION_STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}, expected one of {FUSION_STRATEGIES}")
    logits = np.asarray(logits, dtype=np.float64)
    probs = np.exp(log_softmax_data(logits, axis=2))
    branch_conf = probs.max(axis=2)        # (k, B, H, W)
    branch_label = probs.argmax(axis=2)    # ties to lower class index

    if strategy == "confidence":
        winner = branch_conf.argmax(axis=0)  # ties to lower branch index
        conf = np.take_along_axis(branch_conf, winner[None], axis=0)[0]
        label = np.take_along_axis(branch_label, winner[None], axis=0)[0]
    elif strategy == "best_expert":
        scores = branch_conf.mean(axis=(2, 3))  # (k, B)
        best = scores.argmax(axis=0)            # per sample
        batch = np.arange(logits.shape[1])
        conf = branch_conf[best, batch]
        label = branch_label[best, batch]
    elif strategy == "summation":
        summed = np.exp(log_softmax_data(logits.sum(axis=0), axis=1))
        conf = summed.max(axis=1)
        label = summed.argmax(axis=1)
    else:  # ensemble
        mean = probs.mean(axis=0)
        conf = mean.max(axis=1)
        label = mean.argmax(axis=1)
    return label.astype(np.int64), conf


def fuse_teacher_predictions(teacher, x_tgt, strategy: str = "confidence"
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Run every teacher branch on clean target images and fuse the results."""
    with no_grad():
        x = x_tgt if isinstance(x_tgt, Tensor) else Tensor(x_tgt)
        stack = np.stack([teacher.forward_branch(i, x).data
                          for i in range(1, teacher.num_sources + 1)])
    return fuse_predictions(stack, strategy)


# -- strong transformation ---------------------------------------------------

@dataclass(frozen=True)
class StrongTransform:
    """Geometric part (flips, right-angle rotation, crop + resize back) plus
    photometric part (per-channel affine jitter, gaussian blur). Labels and
    weights receive only the geometric part with nearest-neighbor resampling.
    """

    hflip: bool
    vflip: bool
    rot_quarters: int
    crop: tuple[int, int, int, int]  # top, left, crop_h, crop_w
    gains: tuple[float, float, float]
    biases: tuple[float, float, float]
    blur_sigma: float


def identity_transform(height: int, width: int) -> StrongTransform:
    return StrongTransform(False, False, 0, (0, 0, height, width),
                           (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.0)


def sample_strong_transform(height: int, width: int, rng: np.random.Generator,
                            flip_prob: float = 0.5,
                            crop_scale: tuple[float, float] = (0.6, 1.0),
                            gain_range: tuple[float, float] = (0.8, 1.2),
                            bias_range: tuple[float, float] = (-0.1, 0.1),
                            blur_max: float = 1.0) -> StrongTransform:
    hflip = rng.random() < flip_prob
    vflip = rng.random() < flip_prob
    # quarter turns change the aspect of non-square grids
    rot = int(rng.integers(0, 4)) if height == width else int(rng.integers(0, 2)) * 2
    crop_h = crop_w = 0
    for _ in range(1000):
        s = rng.uniform(*crop_scale)
        crop_h = int(round(height * s))
        crop_w = int(round(width * s))
        if crop_h >= 8 and crop_w >= 8:
            break
    else:
        crop_h, crop_w = max(8, crop_h), max(8, crop_w)
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    gains = tuple(rng.uniform(*gain_range, size=3))
    biases = tuple(rng.uniform(*bias_range, size=3))
    sigma = rng.uniform(0.0, blur_max)
    return StrongTransform(hflip, vflip, rot, (top, left, crop_h, crop_w),
                           gains, biases, sigma)


def _apply_geometry(arr: np.ndarray, t: StrongTransform) -> np.ndarray:
    """Flips and rotation on the trailing two axes."""
    if t.hflip:
        arr = arr[..., ::-1]
    if t.vflip:
        arr = arr[..., ::-1, :]
    if t.rot_quarters % 4:
        arr = np.rot90(arr, k=t.rot_quarters % 4, axes=(-2, -1))
    return arr


def _resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()
    rows = np.minimum((np.arange(out_h) + 0.5) * in_h / out_h, in_h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * in_w / out_w, in_w - 1).astype(np.int64)
    return arr[..., rows[:, None], cols[None, :]]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        lo = np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = np.clip(src - lo, 0.0, 1.0)
        return lo, hi, frac

    r0, r1, fr = axis_coords(out_h, in_h)
    c0, c1, fc = axis_coords(out_w, in_w)
    top = img[..., r0[:, None], c0[None, :]] * (1 - fc) + img[..., r0[:, None], c1[None, :]] * fc
    bot = img[..., r1[:, None], c0[None, :]] * (1 - fc) + img[..., r1[:, None], c1[None, :]] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 1e-3:
        return img
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    rows = sum(padded[:, i:i + img.shape[1], :] * kernel[i] for i in range(kernel.size))
    padded = np.pad(rows, ((0, 0), (0, 0), (radius, radius)), mode="reflect")
    return sum(padded[:, :, i:i + img.shape[2]] * kernel[i] for i in range(kernel.size))


def apply_strong_transform(t: StrongTransform, image: np.ndarray) -> np.ndarray:
    """Geometric plus photometric transform of a (3, H, W) image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    out = _apply_geometry(image, t)
    top, left, ch, cw = t.crop
    out = out[..., top:top + ch, left:left + cw]
    out = _resize_bilinear(out, h, w)
    gains = np.asarray(t.gains)[:, None, None]
    biases = np.asarray(t.biases)[:, None, None]
    out = np.clip(out * gains + biases, 0.0, 1.0)
    return _gaussian_blur(out, t.blur_sigma)


def trans_labels(t: StrongTransform, labels: np.ndarray, weights: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Replay the geometric part on a label map and weight grid (nearest)."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if labels.shape != weights.shape:
        raise ValueError(f"labels {labels.shape} and weights {weights.shape} disagree")
    h, w = labels.shape
    top, left, ch, cw = t.crop
    y = _apply_geometry(labels, t)[top:top + ch, left:left + cw]
    wt = _apply_geometry(weights, t)[top:top + ch, left:left + cw]
    return (_resize_nearest(y, h, w).astype(np.int64),
            _resize_nearest(wt, h, w))
