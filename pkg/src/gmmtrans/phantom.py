"""Synthetic two-domain phantoms with tiny bright structures, and the on-disk dataset layout.

Domain 1 mimics a non-contrast scan; domain 2 is the same anatomy with the
vessel brightened by an additive shift. Plaques (2-4 px discs next to the
vessel wall) are the brightest structures and look the same in both domains.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError
from .pngio import read_image, read_label_image, write_image, write_label_image

ROLES = ("train_a", "train_b", "val", "test")
MAX_ATTEMPTS = 1000


@dataclass
class PhantomSpec:
    image_size: int = 256
    num_organs: Tuple[int, int] = (2, 4)
    organ_intensity: Tuple[float, float] = (0.2, 0.45)
    body_intensity: float = 0.12
    vessel_intensity: float = 0.35
    vessel_radius: Tuple[float, float] = (2.5, 3.5)
    vessel_intensity_shift: float = 0.25
    num_plaques: Tuple[int, int] = (2, 4)
    plaque_radius: Tuple[float, float] = (1.0, 2.0)
    plaque_intensity: Tuple[float, float] = (0.9, 1.0)
    noise_sigma: float = 0.01

    def __post_init__(self):
        for name in ("num_organs", "organ_intensity", "vessel_radius", "num_plaques",
                     "plaque_radius", "plaque_intensity"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        bad = []
        if self.image_size < 32:
            bad.append("image_size")
        for name in ("num_organs", "num_plaques"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < (1 if name == "num_plaques" else 0):
                bad.append(name)
        for name in ("organ_intensity", "plaque_intensity"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                bad.append(name)
        for name in ("vessel_radius", "plaque_radius"):
            lo, hi = getattr(self, name)
            if not 0.5 <= lo <= hi:
                bad.append(name)
        if not 0.0 <= self.vessel_intensity_shift <= 1.0:
            bad.append("vessel_intensity_shift")
        if not 0.0 <= self.body_intensity <= 1.0 or not 0.0 <= self.vessel_intensity <= 1.0:
            bad.append("body_intensity" if not 0.0 <= self.body_intensity <= 1.0 else "vessel_intensity")
        if self.vessel_intensity + self.vessel_intensity_shift > 1.0:
            bad.append("vessel_intensity_shift")
        if self.noise_sigma < 0:
            bad.append("noise_sigma")
        # plaques must be the brightest structures in both domains
        brightest_other = max(self.organ_intensity[1], self.vessel_intensity + self.vessel_intensity_shift)
        if not self.plaque_intensity[0] > brightest_other:
            bad.append("plaque_intensity")
        if bad:
            raise ConfigError(f"invalid phantom spec fields: {', '.join(sorted(set(bad)))}", sorted(set(bad)))

    @property
    def detection_threshold(self) -> float:
        """Midpoint between the organ and plaque intensity ranges."""
        return 0.5 * (self.organ_intensity[1] + self.plaque_intensity[0])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


@dataclass
class PhantomPair:
    image_a: np.ndarray
    image_b: np.ndarray
    plaque_mask: np.ndarray
    organ_masks: np.ndarray
    seed: int
    vessel_mask: Optional[np.ndarray] = field(default=None, repr=False)


def _blob_mask(yy, xx, cy, cx, ry, rx, angle, wobble, phase, lobes):
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u, v = (c * dx + s * dy) / rx, (-s * dx + c * dy) / ry
    theta = np.arctan2(v, u)
    radius = 1.0 + wobble * np.sin(lobes * theta + phase)
    return u * u + v * v <= radius * radius


def _centerline(rng, n, body_mask):
    """Dense points of a smooth vertical vessel path through the body."""
    cx = n * rng.uniform(0.4, 0.6)
    amp = n * rng.uniform(0.04, 0.1)
    freq = rng.uniform(1.0, 2.5)
    phase = rng.uniform(0, 2 * math.pi)
    ys = np.linspace(0.22 * n, 0.78 * n, 8 * n)
    xs = cx + amp * np.sin(freq * 2 * math.pi * (ys / n) + phase)
    pts = np.stack([ys, xs], axis=1)
    iy, ix = np.clip(np.rint(pts).astype(int), 0, n - 1).T
    return pts[body_mask[iy, ix]]


def generate_phantom_pair(spec: PhantomSpec, seed: int) -> PhantomPair:
    """Deterministic phantom pair for ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    body = _blob_mask(yy, xx, n / 2, n / 2, 0.36 * n * rng.uniform(0.9, 1.05),
                      0.44 * n * rng.uniform(0.9, 1.05), rng.uniform(-0.1, 0.1), 0.03,
                      rng.uniform(0, 2 * math.pi), 3)
    anatomy = np.where(body, spec.body_intensity, 0.0)
    organs = np.zeros((n, n), dtype=np.int64)
    for label in range(1, int(rng.integers(spec.num_organs[0], spec.num_organs[1] + 1)) + 1):
        for _ in range(MAX_ATTEMPTS):
            cy, cx = rng.uniform(0.25 * n, 0.75 * n), rng.uniform(0.2 * n, 0.8 * n)
            if body[int(cy), int(cx)]:
                break
        else:
            raise GenerationError(f"could not place organ {label} inside the body (seed {seed})")
        mask = _blob_mask(yy, xx, cy, cx, n * rng.uniform(0.05, 0.12), n * rng.uniform(0.05, 0.12),
                          rng.uniform(0, math.pi), rng.uniform(0.05, 0.2),
                          rng.uniform(0, 2 * math.pi), int(rng.integers(2, 5))) & body
        anatomy[mask] = rng.uniform(*spec.organ_intensity)
        organs[mask] = label
    anatomy = ndimage.gaussian_filter(anatomy, 1.0)

    line = _centerline(rng, n, body)
    if len(line) < 2:
        raise GenerationError(f"vessel path does not cross the body (seed {seed})")
    vessel_r = rng.uniform(*spec.vessel_radius)
    seeds_img = np.zeros((n, n), dtype=bool)
    iy, ix = np.clip(np.rint(line).astype(int), 0, n - 1).T
    seeds_img[iy, ix] = True
    vessel = ndimage.distance_transform_edt(~seeds_img) <= vessel_r
    anatomy[vessel] = spec.vessel_intensity
    organs[vessel] = 0

    plaque = np.zeros((n, n), dtype=bool)
    plaque_values = np.zeros((n, n))
    want = int(rng.integers(spec.num_plaques[0], spec.num_plaques[1] + 1))
    placed, attempts = 0, 0
    while placed < want:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(f"placed {placed}/{want} plaques after {MAX_ATTEMPTS} attempts (seed {seed})")
        i = int(rng.integers(1, len(line) - 1))
        tangent = line[i + 1] - line[i - 1]
        normal = np.array([-tangent[1], tangent[0]]) / (np.linalg.norm(tangent) + 1e-12)
        side = 1.0 if rng.random() < 0.5 else -1.0
        center = line[i] + side * normal * vessel_r * rng.uniform(0.6, 1.1)
        r = rng.uniform(*spec.plaque_radius)
        disc = (yy - np.rint(center[0])) ** 2 + (xx - np.rint(center[1])) ** 2 <= r * r
        # keep plaques separate 8-connected components and inside the body
        if (ndimage.binary_dilation(disc, np.ones((3, 3))) & plaque).any() or not body[disc].all():
            continue
        plaque |= disc
        plaque_values[disc] = rng.uniform(*spec.plaque_intensity)
        placed += 1

    clean_a = np.where(plaque, plaque_values, anatomy)
    clean_b = clean_a + np.where(vessel & ~plaque, spec.vessel_intensity_shift, 0.0)
    image_a = np.clip(clean_a + spec.noise_sigma * rng.standard_normal((n, n)), 0.0, 1.0)
    image_b = np.clip(clean_b + spec.noise_sigma * rng.standard_normal((n, n)), 0.0, 1.0)
    return PhantomPair(image_a, image_b, plaque.astype(np.uint8), organs, int(seed), vessel_mask=vessel & ~plaque)


def _rel(root: Path, path: Path) -> str:
    return path.relative_to(root).as_posix()


def build_dataset(spec: PhantomSpec, n_train_a: int, n_train_b: int, n_val: int, n_test: int,
                  root_path, seed: int) -> List[dict]:
    """Write the unpaired training splits and paired val/test splits; returns the manifest.

    Every record gets its own seed; seeds are drawn without replacement so
    train_a, train_b, val and test never share a phantom.
    """
    counts = {"train_a": n_train_a, "train_b": n_train_b, "val": n_val, "test": n_test}
    bad = [k for k, v in counts.items() if int(v) < 1]
    if bad:
        raise ConfigError(f"dataset counts must be >= 1: {', '.join(bad)}", bad)
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for role in ROLES:
        (root / role).mkdir(exist_ok=True)

    total = sum(counts.values())
    seeds = np.random.default_rng(seed).choice(2**31 - 1, size=total, replace=False)
    manifest, cursor = [], 0
    for role in ROLES:
        for i in range(counts[role]):
            s = int(seeds[cursor])
            cursor += 1
            pair = generate_phantom_pair(spec, s)
            stem = root / role / f"{i:04d}"
            if role == "train_a":
                files = {"image": stem.with_suffix(".png")}
                write_image(pair.image_a, files["image"])
            elif role == "train_b":
                files = {"image": stem.with_suffix(".png")}
                write_image(pair.image_b, files["image"])
            else:
                files = {
                    "image_a": root / role / f"{i:04d}_a.png",
                    "image_b": root / role / f"{i:04d}_b.png",
                    "plaque": root / role / f"{i:04d}_plaque.png",
                    "organs": root / role / f"{i:04d}_organs.png",
                }
                write_image(pair.image_a, files["image_a"])
                write_image(pair.image_b, files["image_b"])
                write_label_image(pair.plaque_mask, files["plaque"])
                write_label_image(pair.organ_masks, files["organs"])
            manifest.append({"seed": s, "role": role, "files": {k: _rel(root, v) for k, v in files.items()}})

    (root / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_manifest(root_path) -> List[dict]:
    path = Path(root_path) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no manifest.json in {root_path}") from None


def load_phantom_spec(root_path) -> PhantomSpec:
    path = Path(root_path) / "phantom_spec.json"
    return PhantomSpec.from_dict(json.loads(path.read_text())) if path.exists() else PhantomSpec()


def load_training_images(root_path, manifest=None):
    """(train_a images, train_b images); raises FileNotFoundError naming the first missing file."""
    root = Path(root_path)
    manifest = manifest if manifest is not None else load_manifest(root)
    out = {"train_a": [], "train_b": []}
    for rec in manifest:
        if rec["role"] in out:
            path = root / rec["files"]["image"]
            if not path.exists():
                raise FileNotFoundError(f"missing dataset file {path}")
            out[rec["role"]].append(path)
    return [read_image(p) for p in out["train_a"]], [read_image(p) for p in out["train_b"]]


def load_pairs(root_path, role: str, manifest=None) -> List[PhantomPair]:
    root = Path(root_path)
    manifest = manifest if manifest is not None else load_manifest(root)
    pairs = []
    for rec in manifest:
        if rec["role"] != role:
            continue
        f = rec["files"]
        pairs.append(PhantomPair(
            image_a=read_image(root / f["image_a"]),
            image_b=read_image(root / f["image_b"]),
            plaque_mask=read_label_image(root / f["plaque"]).astype(np.uint8),
            organ_masks=read_label_image(root / f["organs"]),
            seed=int(rec["seed"]),
        ))
    return pairs
