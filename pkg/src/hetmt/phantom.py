"""Paired pseudo-MR / pseudo-CT phantom generation with a known noise field.

Each case is a set of elliptical "organs" on a quiet background. The
pseudo-CT is rendered from per-class intensity means (with a bright
cortical-like rim on the bone classes), a smooth shared texture field and
additive Gaussian noise whose per-voxel standard deviation is

    sigma(x) = sigma_lo + (sigma_hi - sigma_lo) * exp(-d(x) / decay)

where ``d(x)`` is the exact Euclidean distance (in voxels) to the nearest
label-boundary voxel. The pseudo-MR shares the texture field but carries no
label-independent noise and does not show the bone rim, so the mapping from
MR to CT intensity is ambiguous without shape context. The noise std map is
stored with every case, which is what makes calibration claims checkable.

Generation is a pure function of (spec, case seed): identical inputs give
bit-identical volumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import PhantomError
from .volume import Volume, as_intensity, as_label, as_variance, read_volume, write_volume

CLASS_NAMES = ("background", "lfemur", "rfemur", "prostate", "rectum", "bladder")

_MAX_PLACE_ATTEMPTS = 50


@dataclass(frozen=True)
class OrganPrior:
    """Placement prior for one elliptical organ.

    ``center`` and ``radius`` hold one (lo, hi) range per image axis, in
    fractions of the image extent; actual values are drawn uniformly.
    """

    name: str
    label: int
    center: tuple[tuple[float, float], ...]
    radius: tuple[tuple[float, float], ...]


def _default_organs() -> tuple[OrganPrior, ...]:
    # Rough axial-pelvis layout on a [H, W] grid (axis 0 top-to-bottom).
    # Ranges are chosen so that worst-case draws keep organs disjoint and
    # inside the image.
    return (
        OrganPrior("lfemur", 1, ((0.48, 0.56), (0.14, 0.19)), ((0.10, 0.14), (0.075, 0.105))),
        OrganPrior("rfemur", 2, ((0.48, 0.56), (0.81, 0.86)), ((0.10, 0.14), (0.075, 0.105))),
        OrganPrior("bladder", 5, ((0.25, 0.31), (0.46, 0.54)), ((0.08, 0.11), (0.10, 0.13))),
        OrganPrior("prostate", 3, ((0.52, 0.57), (0.47, 0.53)), ((0.055, 0.07), (0.06, 0.08))),
        OrganPrior("rectum", 4, ((0.76, 0.81), (0.46, 0.54)), ((0.05, 0.07), (0.06, 0.09))),
    )


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, intensity and noise model of the phantom population."""

    size: tuple[int, ...] = (64, 64)
    num_classes: int = 6
    ct_means: tuple[float, ...] = (0.0, 600.0, 600.0, 40.0, -50.0, 10.0)
    mr_means: tuple[float, ...] = (20.0, 110.0, 110.0, 140.0, 60.0, 200.0)
    bone_rim_value: float = 800.0
    bone_rim_width: float = 2.0
    bone_labels: tuple[int, ...] = (1, 2)
    organs: tuple[OrganPrior, ...] = field(default_factory=_default_organs)
    sigma_hi: float = 50.0
    sigma_lo: float = 8.0
    boundary_decay: float = 3.0
    texture_scale: float = 6.0
    texture_amplitude: float = 12.0
    spacing: tuple[float, ...] = (1.0, 1.0)
    seed: int = 0

    def validate(self) -> None:
        ndim = len(self.size)
        if ndim not in (2, 3):
            raise PhantomError(f"phantom must be 2D or 3D, got size {self.size}")
        if any(s < 8 for s in self.size):
            raise PhantomError(f"image size {self.size} is too small")
        if len(self.spacing) != ndim or any(s <= 0 for s in self.spacing):
            raise PhantomError(f"bad spacing {self.spacing} for size {self.size}")
        if self.num_classes < 2:
            raise PhantomError("need at least background plus one organ class")
        if len(self.ct_means) != self.num_classes or len(self.mr_means) != self.num_classes:
            raise PhantomError(
                f"intensity tables must have {self.num_classes} entries, got "
                f"{len(self.ct_means)} CT / {len(self.mr_means)} MR")
        if not (self.sigma_hi >= self.sigma_lo > 0):
            raise PhantomError(
                f"need sigma_hi >= sigma_lo > 0, got {self.sigma_hi}, {self.sigma_lo}")
        if self.boundary_decay <= 0:
            raise PhantomError("boundary decay length must be positive")
        seen = set()
        for organ in self.organs:
            if not (1 <= organ.label < self.num_classes):
                raise PhantomError(f"organ {organ.name} has label {organ.label} "
                                   f"outside [1, {self.num_classes - 1}]")
            if organ.label in seen:
                raise PhantomError(f"duplicate label {organ.label}")
            seen.add(organ.label)
            if len(organ.center) != ndim or len(organ.radius) != ndim:
                raise PhantomError(f"organ {organ.name} priors must have {ndim} axes")
            for (c_lo, c_hi), (r_lo, r_hi) in zip(organ.center, organ.radius):
                if not (0 < r_lo <= r_hi and c_lo <= c_hi):
                    raise PhantomError(f"organ {organ.name} has an empty prior range")
                if c_hi + r_hi > 1.0 or c_lo - r_hi < 0.0:
                    raise PhantomError(
                        f"organ {organ.name} can leave the image under its prior")


@dataclass
class CaseBundle:
    """One generated case: four co-registered volumes plus an id."""

    mr: Volume
    ct: Volume
    labels: Volume
    sigma_true: Volume
    case_id: str

    def __post_init__(self):
        shapes = {v.shape for v in (self.mr, self.ct, self.labels, self.sigma_true)}
        if len(shapes) != 1:
            raise PhantomError(f"case {self.case_id} has mismatched shapes: {shapes}")


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    axes = np.ogrid[tuple(slice(0, s) for s in shape)]
    rho2 = sum(((ax - c) / r) ** 2 for ax, c, r in zip(axes, center, radii))
    return rho2 <= 1.0


def _boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Voxels that touch a differently-labelled face neighbour."""
    bnd = np.zeros(labels.shape, dtype=bool)
    for ax in range(labels.ndim):
        lo = [slice(None)] * labels.ndim
        hi = [slice(None)] * labels.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        diff = labels[tuple(lo)] != labels[tuple(hi)]
        bnd[tuple(lo)] |= diff
        bnd[tuple(hi)] |= diff
    return bnd


def boundary_distance(labels: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (voxels) to the nearest boundary voxel.

    Boundary voxels themselves are at distance zero. Brute force over the
    boundary set; intended for desk-scale grids (<= ~128 per axis).
    """
    bnd = _boundary_mask(labels)
    if not bnd.any():
        return np.full(labels.shape, np.inf)
    bpts = np.argwhere(bnd).astype(np.float64)
    coords = np.indices(labels.shape).reshape(labels.ndim, -1).T.astype(np.float64)
    dist = np.empty(coords.shape[0])
    chunk = 2048
    for start in range(0, coords.shape[0], chunk):
        block = coords[start:start + chunk]
        d2 = ((block[:, None, :] - bpts[None, :, :]) ** 2).sum(axis=2)
        dist[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return dist.reshape(labels.shape)


def _place_organs(spec: PhantomSpec, rng: np.random.Generator):
    labels = np.zeros(spec.size, dtype=np.uint8)
    occupied = np.zeros(spec.size, dtype=bool)
    geometry = {}
    sizes = np.asarray(spec.size, dtype=np.float64)
    for organ in spec.organs:
        placed = False
        for _ in range(_MAX_PLACE_ATTEMPTS):
            center = np.array([rng.uniform(lo, hi) for lo, hi in organ.center]) * sizes - 0.5
            radii = np.array([rng.uniform(lo, hi) for lo, hi in organ.radius]) * sizes
            mask = _ellipsoid_mask(spec.size, center, radii)
            if not mask.any():
                continue
            # Keep at least one voxel of clearance between organs.
            if (mask & ndimage.binary_dilation(occupied)).any():
                continue
            labels[mask] = organ.label
            occupied |= mask
            geometry[organ.label] = (center, radii)
            placed = True
            break
        if not placed:
            raise PhantomError(
                f"could not place organ {organ.name!r} after "
                f"{_MAX_PLACE_ATTEMPTS} attempts")
    return labels, geometry


def _smooth_texture(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    raw = rng.standard_normal(spec.size)
    smooth = ndimage.gaussian_filter(raw, sigma=spec.texture_scale)
    std = smooth.std()
    if std < 1e-12:
        return np.zeros(spec.size)
    return smooth * (spec.texture_amplitude / std)


def gen_phantom_fields(spec: PhantomSpec, case_seed: int) -> dict:
    """Generate one case and return all intermediate fields as float64.

    Keys: ``labels``, ``ct_clean`` (the noiseless pseudo-CT), ``ct``,
    ``mr``, ``sigma`` (noise std), ``distance``. ``ct_clean`` is what a
    perfect regressor would predict, so tests can score calibration against
    the known noise.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(case_seed & 0xFFFFFFFFFFFFFFFF))

    labels, geometry = _place_organs(spec, rng)
    texture = _smooth_texture(spec, rng)
    noise = rng.standard_normal(spec.size)

    dist = boundary_distance(labels)
    sigma = spec.sigma_lo + (spec.sigma_hi - spec.sigma_lo) * np.exp(
        -dist / spec.boundary_decay)

    ct_clean = np.asarray(spec.ct_means, dtype=np.float64)[labels]
    for lbl in spec.bone_labels:
        if lbl not in geometry:
            continue
        center, radii = geometry[lbl]
        inner_radii = np.maximum(radii - spec.bone_rim_width, 0.5)
        inner = _ellipsoid_mask(spec.size, center, inner_radii)
        rim = (labels == lbl) & ~inner
        ct_clean[rim] = spec.bone_rim_value
    ct_clean = ct_clean + texture

    mr = np.asarray(spec.mr_means, dtype=np.float64)[labels] + texture
    ct = ct_clean + noise * sigma

    return {"labels": labels, "ct_clean": ct_clean, "ct": ct, "mr": mr,
            "sigma": sigma, "distance": dist}


def gen_phantom_case(spec: PhantomSpec, case_seed: int,
                     case_id: str | None = None) -> CaseBundle:
    """Generate one phantom case as a bundle of four volumes."""
    fields = gen_phantom_fields(spec, case_seed)
    sp = spec.spacing
    return CaseBundle(
        mr=as_intensity(fields["mr"], sp),
        ct=as_intensity(fields["ct"], sp),
        labels=as_label(fields["labels"], sp),
        sigma_true=as_variance(fields["sigma"], sp),
        case_id=case_id if case_id is not None else f"case-seed{case_seed}",
    )


_CHANNEL_NAMES = ("mr", "ct", "labels", "sigma_true")


def gen_dataset(spec: PhantomSpec, n_cases: int, out_dir,
                train_fraction: float = 0.75) -> Path:
    """Write ``n_cases`` cases plus a manifest with a train/test split.

    Case ``i`` uses seed ``spec.seed + i``; the first
    ``round(n_cases * train_fraction)`` cases are flagged train, the rest
    test. Returns the manifest path. Re-running with identical arguments
    reproduces every file byte for byte.
    """
    if n_cases < 1:
        raise PhantomError(f"n_cases must be >= 1, got {n_cases}")
    if not (0.0 <= train_fraction <= 1.0):
        raise PhantomError(f"train_fraction must be in [0, 1], got {train_fraction}")
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    n_train = int(round(n_cases * train_fraction))
    entries = []
    for i in range(n_cases):
        case_id = f"case{i:03d}"
        bundle = gen_phantom_case(spec, spec.seed + i, case_id)
        entry = {"id": case_id, "split": "train" if i < n_train else "test"}
        for name in _CHANNEL_NAMES:
            fname = f"{case_id}_{name}.bin"
            write_volume(getattr(bundle, name), out / fname)
            entry[name] = fname
        entries.append(entry)

    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, sort_keys=True, indent=2) + "\n")
    return manifest


def load_manifest(manifest_path) -> list[dict]:
    """Read a manifest; volume paths are resolved relative to it."""
    path = Path(manifest_path)
    entries = json.loads(path.read_text())
    root = path.parent
    out = []
    for entry in entries:
        resolved = dict(entry)
        for name in _CHANNEL_NAMES:
            resolved[name] = root / entry[name]
        out.append(resolved)
    return out


def load_case_bundle(entry: dict, num_classes: int | None = None) -> CaseBundle:
    return CaseBundle(
        mr=read_volume(entry["mr"]),
        ct=read_volume(entry["ct"]),
        labels=read_volume(entry["labels"], num_classes=num_classes),
        sigma_true=read_volume(entry["sigma_true"]),
        case_id=entry["id"],
    )


def small_spec(size: tuple[int, ...] = (32, 32), **overrides) -> PhantomSpec:
    """A reduced-size spec with texture/noise scaled for quick experiments."""
    return replace(PhantomSpec(), size=size, spacing=(1.0,) * len(size),
                   texture_scale=3.0, **overrides)
