"""Cross-domain mixing: class- and region-level masks, pixel pasting, and the
confidence-weighted self-supervised loss for each source branch.

Mask convention: 1 keeps the source pixel, 0 takes the target pixel (and the
donor branch's pseudo-label).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mscada.tensor import (
    IGNORE_LABEL,
    Tensor,
    masked_weighted_cross_entropy,
)
from mscada.tensor import log_softmax_data

CLASS_LEVEL = "class"
REGION_LEVEL = "region"


@dataclass
class MixMask:
    mask: np.ndarray  # (H, W), values in {0, 1}
    kind: str         # CLASS_LEVEL or REGION_LEVEL


@dataclass
class MixedBatch:
    image: np.ndarray            # (3, H, W)
    label: np.ndarray            # (H, W), union classes or IGNORE_LABEL
    weight: np.ndarray | None    # (H, W) in [0, 1], None until assigned
    kind: str


def make_class_mask(source_label: np.ndarray, ratio: float,
                    rng: np.random.Generator) -> MixMask:
    """Select ceil(|P| * ratio) of the classes present and mask their pixels."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"class ratio must be in (0, 1], got {ratio}")
    source_label = np.asarray(source_label)
    present = np.unique(source_label[source_label != IGNORE_LABEL])
    if present.size == 0:
        raise ValueError("degenerate tile: no labeled classes to select from")
    n_pick = math.ceil(present.size * ratio)
    chosen = rng.choice(present, size=n_pick, replace=False)
    mask = np.isin(source_label, chosen).astype(np.uint8)
    return MixMask(mask, CLASS_LEVEL)


def make_region_mask(height: int, width: int, area_ratio: float,
                     rng: np.random.Generator) -> MixMask:
    """One axis-aligned rectangle of ~area_ratio*h*w pixels (within half a
    row), aspect ratio log-uniform in [0.5, 2], placed uniformly."""
    if not 0.0 < area_ratio < 1.0:
        raise ValueError(f"area ratio must be in (0, 1), got {area_ratio}")
    area = area_ratio * height * width
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    rect_h = int(np.clip(round(math.sqrt(area * aspect)), 1, height))
    rect_w = int(np.clip(round(area / rect_h), max(1, math.ceil(area / height)), width))
    rect_h = int(np.clip(round(area / rect_w), 1, height))
    top = int(rng.integers(0, height - rect_h + 1))
    left = int(rng.integers(0, width - rect_w + 1))
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[top:top + rect_h, left:left + rect_w] = 1
    return MixMask(mask, REGION_LEVEL)


def apply_mix(x_src: np.ndarray, y_src: np.ndarray, x_tgt: np.ndarray,
              y_pseudo_donor: np.ndarray, mask: MixMask) -> MixedBatch:
    """Pixelwise selection: source where mask is 1, target (with the donor
    branch's teacher pseudo-label) where mask is 0."""
    x_src, x_tgt = np.asarray(x_src, dtype=np.float64), np.asarray(x_tgt, dtype=np.float64)
    y_src, y_don = np.asarray(y_src), np.asarray(y_pseudo_donor)
    m = mask.mask
    if not (x_src.shape == x_tgt.shape and y_src.shape == y_don.shape == m.shape
            and x_src.shape[-2:] == m.shape):
        raise ValueError(
            f"mixing shapes disagree: images {x_src.shape}/{x_tgt.shape}, "
            f"labels {y_src.shape}/{y_don.shape}, mask {m.shape}")
    image = np.where(m[None].astype(bool), x_src, x_tgt)
    label = np.where(m.astype(bool), y_src, y_don).astype(np.int64)
    return MixedBatch(image, label, None, mask.kind)


def complement(mask: MixMask) -> MixMask:
    return MixMask((1 - mask.mask).astype(np.uint8), mask.kind)


def confidence_weight_map(target_logits, mask, tau: float = 0.968):
    """Weight grid per the confidence rule: 1 on source pixels, w_t elsewhere,
    where w_t is the fraction of target pixels whose maximum softmax
    probability strictly exceeds tau (computed on the unmixed prediction).

    Accepts a single (C, H, W) prediction with one mask, or a (B, C, H, W)
    batch with a list of masks.
    """
    logits = target_logits.data if isinstance(target_logits, Tensor) else np.asarray(target_logits)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    if logits.ndim == 3:
        return _weight_map_single(logits, mask.mask, tau)
    if logits.ndim == 4:
        if len(mask) != logits.shape[0]:
            raise ValueError(f"need {logits.shape[0]} masks, got {len(mask)}")
        return np.stack([_weight_map_single(logits[b], mask[b].mask, tau)
                         for b in range(logits.shape[0])])
    raise ValueError(f"expected (C,H,W) or (B,C,H,W) logits, got {logits.shape}")


def _weight_map_single(logits: np.ndarray, mask: np.ndarray, tau: float) -> np.ndarray:
    probs = np.exp(log_softmax_data(logits, axis=0))
    max_prob = probs.max(axis=0)
    w_t = float((max_prob > tau).sum()) / max_prob.size
    return np.where(mask.astype(bool), 1.0, w_t)


def stack_mixed(batches: list[MixedBatch]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack per-sample mixed results into batch arrays for the loss."""
    for mb in batches:
        if mb.weight is None:
            raise ValueError("mixed batch has no weight map assigned")
    images = np.stack([mb.image for mb in batches])
    labels = np.stack([mb.label for mb in batches])
    weights = np.stack([mb.weight for mb in batches])
    return images, labels, weights


def branch_ssl_loss(model, i: int, mixed) -> Tensor:
    """Self-supervised loss of branch i on mixed samples; gradients reach the
    shared backbone, expert i and classifier i only."""
    batches = [mixed] if isinstance(mixed, MixedBatch) else list(mixed)
    images, labels, weights = stack_mixed(batches)
    logits = model.forward_branch(i, Tensor(images))
    return masked_weighted_cross_entropy(logits, labels, weights)
