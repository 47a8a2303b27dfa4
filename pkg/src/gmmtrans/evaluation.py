"""Whole-image translation, fine-structure metrics, quality filtering and latent-cluster export."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ContractViolation, ModelError
from .networks import ModelBundle, discriminate, encode, generate
from .patches import extract, extract_patches, make_grid, stitch
from .phantom import PhantomPair, PhantomSpec

_EIGHT = np.ones((3, 3), dtype=bool)
DIRECTIONS = {"1to2": (1, 2), "2to1": (2, 1)}


def parse_direction(direction):
    if isinstance(direction, tuple) and direction in DIRECTIONS.values():
        return direction
    try:
        return DIRECTIONS[str(direction).replace("->", "to")]
    except KeyError:
        raise ContractViolation(f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}") from None


@dataclass
class TranslationResult:
    output: np.ndarray
    direction: str
    stride: int
    patch_scores: np.ndarray


def _check_bundle(bundle: ModelBundle):
    for name, p in bundle.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise ModelError(f"parameter {name} is not finite")


@torch.no_grad()
def translate_patches(bundle: ModelBundle, patches: np.ndarray, source: int, target: int, chunk: int = 256):
    """Deterministic translation: decode the posterior mean of each patch's most probable component."""
    dtype = bundle.domain_log_vars_1.dtype
    outs, scores = [], []
    for i in range(0, len(patches), chunk):
        x = torch.as_tensor(patches[i:i + chunk], dtype=dtype)[:, None]
        q = encode(bundle, source, x)
        k = q.mixture_logits.argmax(-1)
        z = q.comp_means[torch.arange(len(k)), k]
        y = generate(bundle, target, z)
        outs.append(y[:, 0].double().numpy())
        scores.append(discriminate(bundle, target, y).double().numpy())
    return np.concatenate(outs), np.concatenate(scores)


def translate_image(bundle: ModelBundle, image, direction="1to2", stride: Optional[int] = None) -> TranslationResult:
    source, target = parse_direction(direction)
    _check_bundle(bundle)
    image = np.asarray(image, dtype=np.float64)
    P = bundle.spec.patch_size
    stride = P // 2 if stride is None else int(stride)
    grid = make_grid(image.shape[0], image.shape[1], P, stride)
    out, scores = translate_patches(bundle, extract(image, grid), source, target)
    result = np.clip(stitch(out, grid), 0.0, 1.0)
    return TranslationResult(result, f"{source}to{target}", stride, scores)


# ---------------------------------------------------------------- structure metrics

@dataclass
class StructureMetrics:
    precision: float
    recall: float
    dice: float
    plaque_retention: float
    plaque_mae: float
    organ_dice: float
    tp: int
    fp: int
    fn: int

    def recomputed_dice(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    denom = a.sum() + b.sum()
    return float(2 * (a & b).sum() / denom) if denom else 0.0


def default_organ_threshold(spec: Optional[PhantomSpec] = None) -> float:
    spec = spec or PhantomSpec()
    return 0.5 * (spec.body_intensity + spec.organ_intensity[0])


def structure_metrics(
    translated,
    ground_truth_pair: PhantomPair,
    threshold: float,
    target_domain: int = 2,
    organ_threshold: Optional[float] = None,
) -> StructureMetrics:
    """Plaque detection/segmentation scores of a translated image against the paired ground truth.

    Detection binarizes at ``threshold`` and matches 8-connected components
    to ground-truth plaques by any-pixel overlap. Undefined ratios are 0.
    ``organ_dice`` compares the above-``organ_threshold`` foreground of the
    translation and of the ground-truth target image.
    """
    pair = ground_truth_pair
    if pair.plaque_mask is None or pair.organ_masks is None:
        raise ContractViolation("ground-truth pair has no masks")
    target = pair.image_b if target_domain == 2 else pair.image_a
    translated = np.asarray(translated, dtype=np.float64)
    if translated.shape != target.shape:
        raise ContractViolation(f"translated image {translated.shape} vs ground truth {target.shape}")
    organ_threshold = default_organ_threshold() if organ_threshold is None else organ_threshold

    truth = np.asarray(pair.plaque_mask) > 0
    pred = translated >= threshold
    pred_labels, n_pred = ndimage.label(pred, structure=_EIGHT)
    true_labels, n_true = ndimage.label(truth, structure=_EIGHT)
    overlap = pred & truth
    matched_pred = len(np.unique(pred_labels[overlap]))
    matched_true = len(np.unique(true_labels[overlap]))
    precision = matched_pred / n_pred if n_pred else 0.0
    recall = matched_true / n_true if n_true else 0.0

    tp = int(overlap.sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    dice = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0

    if n_true:
        peaks = ndimage.maximum(translated, true_labels, index=np.arange(1, n_true + 1))
        retention = float(np.mean(np.asarray(peaks) >= threshold))
        mae = float(np.abs(translated - target)[truth].mean())
    else:
        retention, mae = 0.0, 0.0
    organ = _dice(translated >= organ_threshold, target >= organ_threshold)
    return StructureMetrics(float(precision), float(recall), float(dice), retention, mae, organ, tp, fp, fn)


def vessel_shift_fraction(translated, pair: PhantomPair, direction="1to2") -> float:
    """How far the vessel-region mean moved from the source toward the target ground truth (0 = none, 1 = all)."""
    source, _ = parse_direction(direction)
    src, tgt = (pair.image_a, pair.image_b) if source == 1 else (pair.image_b, pair.image_a)
    diff = pair.image_b - pair.image_a
    spread = diff.max() - np.median(diff)
    vessel = diff > np.median(diff) + 0.5 * spread
    if not vessel.any():
        raise ContractViolation("pair has no vessel enhancement to measure")
    gap = tgt[vessel].mean() - src[vessel].mean()
    return float((np.asarray(translated)[vessel].mean() - src[vessel].mean()) / gap)


def evaluate_pairs(
    bundle: ModelBundle,
    pairs: Sequence[PhantomPair],
    direction="1to2",
    threshold: float = PhantomSpec().detection_threshold,
    stride: Optional[int] = None,
    organ_threshold: Optional[float] = None,
) -> dict:
    """Per-image metrics plus an aggregate of mean and standard deviation per metric."""
    source, target = parse_direction(direction)
    rows = []
    for pair in pairs:
        image = pair.image_a if source == 1 else pair.image_b
        result = translate_image(bundle, image, direction, stride)
        m = structure_metrics(result.output, pair, threshold, target, organ_threshold)
        row = {"seed": pair.seed, **asdict(m),
               "vessel_shift_fraction": vessel_shift_fraction(result.output, pair, direction)}
        rows.append(row)
    keys = ["precision", "recall", "dice", "plaque_retention", "plaque_mae", "organ_dice", "vessel_shift_fraction"]
    aggregate = {k: {"mean": float(np.mean([r[k] for r in rows])), "std": float(np.std([r[k] for r in rows]))}
                 for k in keys}
    return {"images": rows, "aggregate": aggregate}


# ---------------------------------------------------------------- quality control

HF_SHARPNESS = 4.0


def high_frequency_energy(image) -> float:
    """Mean squared residual after a Gaussian blur (sigma 1 px)."""
    image = np.asarray(image, dtype=np.float64)
    return float(np.mean((image - ndimage.gaussian_filter(image, 1.0)) ** 2))


def reference_energy(images) -> float:
    return float(np.mean([high_frequency_energy(im) for im in images]))


def quality_score(bundle: ModelBundle, image, domain: int, reference: float, stride: Optional[int] = None) -> float:
    """Mean patch realness under D_domain, damped by excess high-frequency energy.

    The damping factor exp(-softplus(b (r - 1)) / b), r = energy / reference,
    is strictly decreasing in the image's high-frequency energy and close to
    1 for images no rougher than the real-domain average.
    """
    image = np.asarray(image, dtype=np.float64)
    P = bundle.spec.patch_size
    grid = make_grid(image.shape[0], image.shape[1], P, P if stride is None else stride)
    with torch.no_grad():
        x = torch.as_tensor(extract(image, grid), dtype=bundle.domain_log_vars_1.dtype)[:, None]
        realness = float(discriminate(bundle, domain, x).double().mean())
    r = high_frequency_energy(image) / max(reference, 1e-12)
    excess = math.log1p(math.exp(HF_SHARPNESS * (r - 1.0))) / HF_SHARPNESS if r < 50 else r - 1.0
    return realness * math.exp(-excess)


@dataclass
class FilterResult:
    kept: List[int]
    removed: List[int]
    scores: List[float]


def filter_synthetic(bundle: ModelBundle, images, score_threshold: float, domain: int, reference: float) -> FilterResult:
    scores = [quality_score(bundle, im, domain, reference) for im in images]
    kept = [i for i, s in enumerate(scores) if s >= score_threshold]
    removed = [i for i, s in enumerate(scores) if s < score_threshold]
    return FilterResult(kept, removed, scores)


# ---------------------------------------------------------------- latent clusters

@torch.no_grad()
def latent_cluster_dump(
    bundle: ModelBundle,
    images,
    n_patches: int,
    out_path=None,
    domain: int = 1,
    seed: int = 0,
    plaque_masks=None,
) -> List[dict]:
    """Encode random patches and export their component assignment and latent mean.

    Columns: image_id, row, col, component, entropy, [has_plaque,] z_0..z_{d-1}.
    """
    rng = np.random.default_rng(seed)
    P = bundle.spec.patch_size
    ids = rng.integers(0, len(images), size=n_patches)
    rows = []
    for image_id in ids:
        image = np.asarray(images[image_id], dtype=np.float64)
        anchor = (int(rng.integers(0, image.shape[0] - P + 1)), int(rng.integers(0, image.shape[1] - P + 1)))
        patch = extract_patches(image, [anchor], P)
        q = encode(bundle, domain, torch.as_tensor(patch, dtype=bundle.domain_log_vars_1.dtype)[:, None])
        w = q.weights[0].double()
        k = int(w.argmax())
        entropy = float(-(w * torch.log(w.clamp(min=1e-300))).sum())
        row = {"image_id": int(image_id), "row": anchor[0], "col": anchor[1], "component": k, "entropy": entropy}
        if plaque_masks is not None:
            m = np.asarray(plaque_masks[image_id])
            row["has_plaque"] = int(m[anchor[0]:anchor[0] + P, anchor[1]:anchor[1] + P].any())
        row.update({f"z_{i}": float(v) for i, v in enumerate(q.comp_means[0, k].double())})
        rows.append(row)
    if out_path is not None:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else ["image_id"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


def plaque_cluster_concentration(rows: List[dict], K: int, top: int = 2) -> float:
    """Share of plaque-containing patches in their ``top`` most used components, relative to a uniform spread.

    A value of 2 means those components hold twice the share they would if
    plaque patches were spread evenly over all K components.
    """
    comps = [r["component"] for r in rows if r.get("has_plaque")]
    if not comps:
        return 0.0
    counts = np.sort(np.bincount(comps, minlength=K))[::-1]
    share = counts[:top].sum() / len(comps)
    return float(share / (min(top, K) / K))
