"""Synthetic nodule / non-nodule CT patches and the training-time augmentation.

Intensities follow the CT convention of mapping -1000 HU (air) .. 300 HU
(soft tissue) onto [-1, 1]. Positive patches hold an anisotropic Gaussian
blob near the centre; negatives hold vessel-like tube segments,
blobs cut by the patch border, or textured noise. Tubes point in uniformly
random 3D directions, so orientation is a nuisance variable for the
classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

__all__ = [
    "DatasetConfig",
    "GeneratorParams",
    "PatchSample",
    "PatchDataset",
    "AugmentPolicy",
    "hu_to_unit",
    "generate_patch",
    "augment",
    "augment_volume",
    "build_datasets",
    "DESK_SHAPE",
    "PAPER_SHAPE",
]

DESK_SHAPE = (6, 24, 24)
PAPER_SHAPE = (12, 72, 72)
SPACING_MM = (1.25, 0.5, 0.5)

# Table-1 class ratios: positive fraction per split
TRAIN_POSITIVE = 0.5
VAL_POSITIVE = 0.206
TEST_POSITIVE = 0.133


def hu_to_unit(hu):
    """Map [-1000, 300] HU linearly onto [-1, 1] (clipped)."""
    return np.clip((np.asarray(hu, dtype=np.float64) + 1000.0) / 1300.0 * 2.0 - 1.0, -1.0, 1.0)


@dataclass(frozen=True)
class GeneratorParams:
    """Distribution parameters of the patch generator.

    The validation/test generator uses a shifted copy (see
    :meth:`shifted`) to mimic moving between scanner populations.
    """

    background_hu: float = -820.0
    noise_hu: float = 70.0
    noise_smooth_vox: float = 1.0
    nodule_diameter_mm: tuple = (3.0, 9.0)
    small_nodule_fraction: float = 0.08  # diameters below 3 mm, irrelevant findings
    nodule_hu: tuple = (-350.0, 50.0)
    nodule_elongation: tuple = (1.0, 1.6)
    center_jitter_vox: tuple = (0.25, 2.0, 2.0)
    vessel_radius_mm: tuple = (0.6, 1.6)
    vessel_hu: tuple = (-350.0, 50.0)
    attached_vessel_prob: float = 0.35
    negative_kinds: tuple = (0.55, 0.25, 0.20)  # vessel, border blob, texture

    def shifted(self, magnitude: float = 1.0) -> "GeneratorParams":
        m = float(magnitude)
        lo, hi = self.nodule_diameter_mm
        a, b = self.nodule_hu
        return replace(
            self,
            noise_hu=self.noise_hu * (1.0 + 0.25 * m),
            nodule_diameter_mm=(max(2.0, lo - 0.5 * m), hi - 1.0 * m),
            nodule_hu=(a - 60.0 * m, b - 60.0 * m),
            background_hu=self.background_hu + 20.0 * m,
        )


@dataclass(frozen=True)
class DatasetConfig:
    patch_shape: tuple = DESK_SHAPE
    spacing_mm: tuple = SPACING_MM
    train_sizes: tuple = (30, 300, 3000)
    val_size: int = 300
    test_size: int = 800
    train_positive: float = TRAIN_POSITIVE
    val_positive: float = VAL_POSITIVE
    test_positive: float = TEST_POSITIVE
    malignancy_fraction: float = 0.3
    domain_shift: float = 1.0
    candidates_per_scan: int = 50
    nested: bool = True

    def __post_init__(self):
        if min(self.train_sizes, default=1) < 1 or self.val_size < 1 or self.test_size < 1:
            raise ValueError("dataset sizes must be positive")
        if len(self.patch_shape) != 3:
            raise ValueError(f"patch_shape must be (D, H, W), got {self.patch_shape}")


@dataclass
class PatchSample:
    volume: np.ndarray  # (1, D, H, W) float32 in [-1, 1]
    label: int
    metadata: dict = field(default_factory=dict)


@dataclass
class PatchDataset:
    """Stacked patches plus per-sample annotations used by the FROC scorer."""

    X: np.ndarray  # (n, 1, D, H, W)
    y: np.ndarray
    malignant: np.ndarray
    diameter_mm: np.ndarray
    relevant: np.ndarray
    sample_ids: list
    spacing_mm: tuple = SPACING_MM

    def __len__(self):
        return len(self.y)

    def subset(self, n: int) -> "PatchDataset":
        return PatchDataset(self.X[:n], self.y[:n], self.malignant[:n], self.diameter_mm[:n],
                            self.relevant[:n], self.sample_ids[:n], self.spacing_mm)


def _grid_mm(shape, spacing):
    D, H, W = shape
    z, y, x = np.meshgrid(
        (np.arange(D) - (D - 1) / 2) * spacing[0],
        (np.arange(H) - (H - 1) / 2) * spacing[1],
        (np.arange(W) - (W - 1) / 2) * spacing[2],
        indexing="ij",
    )
    return np.stack([x, y, z], axis=-1)  # (D, H, W, 3) in mm, (x, y, z) order


def _random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


def _background(rng, shape, p: GeneratorParams, noise_scale=1.0):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), p.noise_smooth_vox, mode="wrap")
    noise /= noise.std() + 1e-12
    return p.background_hu + noise * p.noise_hu * noise_scale


# half width at half maximum of a unit Gaussian
_HWHM = math.sqrt(2.0 * math.log(2.0))


def _blob(grid, center_mm, diameter_mm, hu_above, elongation, rng):
    """Anisotropic Gaussian, randomly oriented; its half-maximum surface is
    an ellipsoid whose middle axis equals ``diameter_mm``."""
    rot = _random_rotation(rng)
    sigma = np.array([elongation, 1.0, 1.0 / math.sqrt(elongation)]) * diameter_mm / 2 / _HWHM
    local = (grid - center_mm) @ rot / sigma
    return hu_above * np.exp(-0.5 * (local**2).sum(axis=-1))


def _tube(grid, point_mm, radius_mm, hu_above, rng):
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    rel = grid - point_mm
    along = rel @ direction
    perp = np.linalg.norm(rel - along[..., None] * direction, axis=-1)
    return hu_above / (1.0 + np.exp((perp - radius_mm) / 0.25))


def generate_patch(rng: np.random.Generator, label: int, config: DatasetConfig = DatasetConfig(),
                   params: GeneratorParams = GeneratorParams(), malignant: bool = False,
                   kind: str | None = None) -> PatchSample:
    """Draw one synthetic candidate patch.

    ``kind`` forces a negative sub-type (``vessel``, ``border``, ``texture``);
    by default it is drawn from ``params.negative_kinds``.
    """
    shape = tuple(config.patch_shape)
    spacing = tuple(config.spacing_mm)
    grid = _grid_mm(shape, spacing)
    half_mm = np.array([(shape[2] - 1) / 2 * spacing[2], (shape[1] - 1) / 2 * spacing[1],
                        (shape[0] - 1) / 2 * spacing[0]])
    meta = {"label": int(label), "malignant": bool(malignant and label == 1)}
    vol = _background(rng, shape, params)
    above = lambda rng_range: rng.uniform(*rng_range) - params.background_hu  # noqa: E731

    if label == 1:
        if rng.random() < params.small_nodule_fraction:
            diameter = rng.uniform(1.5, 3.0)
        else:
            lo, hi = params.nodule_diameter_mm
            if meta["malignant"]:
                lo = (lo + hi) / 2
            diameter = rng.uniform(lo, hi)
        jz, jy, jx = params.center_jitter_vox
        center = np.array([rng.uniform(-jx, jx) * spacing[2], rng.uniform(-jy, jy) * spacing[1],
                           rng.uniform(-jz, jz) * spacing[0]])
        vol = vol + _blob(grid, center, diameter, above(params.nodule_hu),
                          rng.uniform(*params.nodule_elongation), rng)
        if rng.random() < params.attached_vessel_prob:
            vol = vol + _tube(grid, center + rng.uniform(-1, 1, 3) * diameter / 2,
                              rng.uniform(*params.vessel_radius_mm), above(params.vessel_hu), rng)
        meta.update(kind="nodule", diameter_mm=float(diameter), center_mm=center.tolist())
    else:
        if kind is None:
            kinds = ("vessel", "border", "texture")
            kind = kinds[rng.choice(3, p=np.asarray(params.negative_kinds) / sum(params.negative_kinds))]
        if kind == "vessel":
            for _ in range(1 + int(rng.random() < 0.4)):
                point = rng.uniform(-0.4, 0.4, 3) * half_mm
                vol = vol + _tube(grid, point, rng.uniform(*params.vessel_radius_mm), above(params.vessel_hu), rng)
        elif kind == "border":
            d = rng.uniform(*params.nodule_diameter_mm)
            side = rng.integers(2)  # x or y face
            center = rng.uniform(-0.5, 0.5, 3) * half_mm
            center[side] = rng.choice([-1, 1]) * (half_mm[side] + rng.uniform(0.0, 0.4) * d)
            vol = vol + _blob(grid, center, d, above(params.nodule_hu), rng.uniform(*params.nodule_elongation), rng)
        elif kind == "texture":
            vol = vol + _background(rng, shape, params, noise_scale=1.5) - params.background_hu
        else:
            raise ValueError(f"unknown negative kind {kind!r}")
        meta.update(kind=kind, diameter_mm=0.0)
    volume = hu_to_unit(vol).astype(np.float32)[None]
    return PatchSample(volume=volume, label=int(label), metadata=meta)


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    rotate: bool = True
    reflect: bool = True
    translate: bool = True
    scale: bool = True
    noise: bool = True
    remap: bool = True
    max_shift_vox: int = 2
    scale_range: tuple = (0.8, 1.2)
    noise_sigma: float = 0.05
    gamma_range: tuple = (0.8, 1.25)
    fill_value: float = -1.0

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls(rotate=False, reflect=False, translate=False, scale=False, noise=False, remap=False)


def rotate_scale_z(vol: np.ndarray, angle_rad: float, scale: float = 1.0, fill: float = -1.0) -> np.ndarray:
    """In-plane rotation about the z axis plus isotropic scaling, trilinear.

    ``vol`` is ``(D, H, W)``. The rotation follows the right-handed
    convention on ``(x, y)``: a positive angle maps +x towards +y.
    """
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    # output -> input map in (z, y, x) index order: R(-angle) / scale
    inv = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]) / scale
    centre = (np.array(vol.shape) - 1) / 2.0
    offset = centre - inv @ centre
    return ndimage.affine_transform(vol, inv, offset=offset, order=1, mode="constant", cval=fill)


def _shift(vol, shifts, fill):
    out = np.full_like(vol, fill)
    src = []
    dst = []
    for s, n in zip(shifts, vol.shape):
        if s >= 0:
            src.append(slice(0, n - s))
            dst.append(slice(s, n))
        else:
            src.append(slice(-s, n))
            dst.append(slice(0, n + s))
    out[tuple(dst)] = vol[tuple(src)]
    return out


def augment_volume(volume: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    """Randomly augment a ``(1, D, H, W)`` (or ``(D, H, W)``) patch."""
    vol = np.asarray(volume, dtype=np.float64)
    squeeze = vol.ndim == 4
    if squeeze:
        vol = vol[0]
    changed = False
    if policy.rotate or policy.scale:
        angle = rng.uniform(0.0, 2 * math.pi) if policy.rotate else 0.0
        scale = rng.uniform(*policy.scale_range) if policy.scale else 1.0
        vol = rotate_scale_z(vol, angle, scale, policy.fill_value)
        changed = True
    if policy.reflect:
        flips = tuple(ax for ax in range(3) if rng.random() < 0.5)
        if flips:
            vol = np.flip(vol, axis=flips)
    if policy.translate and policy.max_shift_vox > 0:
        m = policy.max_shift_vox
        vol = _shift(vol, rng.integers(-m, m + 1, size=3), policy.fill_value)
    if policy.noise:
        vol = vol + rng.normal(0.0, policy.noise_sigma, vol.shape)
        changed = True
    if policy.remap:
        gamma = math.exp(rng.uniform(math.log(policy.gamma_range[0]), math.log(policy.gamma_range[1])))
        vol = np.sign(vol) * np.abs(vol) ** gamma
        changed = True
    if changed:
        vol = np.clip(vol, -1.0, 1.0)
    out = np.ascontiguousarray(vol, dtype=np.float32)
    return out[None] if squeeze else out


def augment(sample: PatchSample, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()) -> PatchSample:
    return PatchSample(augment_volume(sample.volume, rng, policy), sample.label, dict(sample.metadata))


# -- datasets -----------------------------------------------------------------

_SPLIT_KEYS = {"train": 0, "val": 1, "test": 2}


def _sample_rng(master_seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), _SPLIT_KEYS[split], int(index)]))


def _labels_for(split, n, positive_fraction, master_seed):
    if split == "train":
        # alternating labels keep every even-length prefix balanced
        return (np.arange(n) % 2 == 0).astype(np.intp)
    n_pos = int(math.floor(n * positive_fraction))
    labels = np.zeros(n, dtype=np.intp)
    order = np.random.default_rng(np.random.SeedSequence([int(master_seed), _SPLIT_KEYS[split], 10**9])).permutation(n)
    labels[order[:n_pos]] = 1
    return labels


def _make_split(master_seed, split, n, positive_fraction, config, params):
    labels = _labels_for(split, n, positive_fraction, master_seed)
    samples = []
    for i, lab in enumerate(labels):
        rng = _sample_rng(master_seed, split, i)
        malignant = bool(lab) and rng.random() < config.malignancy_fraction
        samples.append(generate_patch(rng, int(lab), config, params, malignant=malignant))
    diam = np.array([s.metadata["diameter_mm"] for s in samples])
    return PatchDataset(
        X=np.stack([s.volume for s in samples]).astype(np.float32),
        y=labels,
        malignant=np.array([s.metadata["malignant"] for s in samples], dtype=bool),
        diameter_mm=diam,
        relevant=(labels == 1) & (diam >= 3.0) & (diam <= 30.0),
        sample_ids=[f"{split}-{i:06d}" for i in range(n)],
        spacing_mm=tuple(config.spacing_mm),
    )


def build_datasets(master_seed: int, config: DatasetConfig = DatasetConfig(),
                   params: GeneratorParams = GeneratorParams()) -> dict:
    """Return ``{"train": {size: PatchDataset}, "val": ..., "test": ...}``.

    Training sets are prefixes of the largest one and hold exactly half
    positives. Validation and test patches come from the shifted generator
    with the configured class ratios (positives rounded down).
    """
    sizes = sorted(set(int(s) for s in config.train_sizes))
    train = {}
    if config.nested:
        full = _make_split(master_seed, "train", sizes[-1], config.train_positive, config, params)
        train = {s: full.subset(s) for s in sizes}
    else:
        for s in sizes:
            train[s] = _make_split(master_seed + s, "train", s, config.train_positive, config, params)
    shifted = params.shifted(config.domain_shift)
    return {
        "train": train,
        "val": _make_split(master_seed, "val", config.val_size, config.val_positive, config, shifted),
        "test": _make_split(master_seed, "test", config.test_size, config.test_positive, config, shifted),
    }
