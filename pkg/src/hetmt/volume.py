"""Grid volumes and their on-disk format.

A volume is a 2D ``[H, W]`` or 3D ``[D, H, W]`` grid with per-axis spacing
in millimetres. On disk each volume is a pair of files sharing a base name:
``<name>.bin`` holds the raw little-endian row-major payload and
``<name>.json`` is a sidecar with fields ``shape``, ``dtype`` (``"f32"`` or
``"u8"``), ``spacing``, ``order`` and ``kind``. Reading back what was
written reproduces the volume bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import VolumeError

KINDS = ("intensity", "label", "variance")

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_TAG_FOR_KIND = {"intensity": "f32", "variance": "f32", "label": "u8"}


@dataclass
class Volume:
    """A scalar or label grid plus spacing metadata.

    ``kind`` selects the payload dtype: intensity and variance volumes are
    32-bit floats, label volumes are 8-bit unsigned integers. Variance
    volumes must be nonnegative everywhere; label volumes must stay within
    ``[0, num_classes)`` whenever a class count is known.
    """

    data: np.ndarray
    spacing: tuple[float, ...] = field(default=())
    kind: str = "intensity"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not self.spacing:
            self.spacing = (1.0,) * self.data.ndim
        self.spacing = tuple(float(s) for s in self.spacing)
        self.validate()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def validate(self, num_classes: int | None = None) -> None:
        if self.kind not in KINDS:
            raise VolumeError(f"unknown volume kind {self.kind!r}")
        if self.data.ndim not in (2, 3):
            raise VolumeError(f"volumes are 2D or 3D, got {self.data.ndim}D")
        if len(self.spacing) != self.data.ndim:
            raise VolumeError(
                f"spacing has {len(self.spacing)} entries for a "
                f"{self.data.ndim}D volume")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be strictly positive, got {self.spacing}")
        want = _DTYPE_TAGS[_TAG_FOR_KIND[self.kind]]
        if self.data.dtype != want:
            raise VolumeError(
                f"{self.kind} volume requires dtype {want}, got {self.data.dtype}")
        if self.kind == "variance" and self.data.size and float(self.data.min()) < 0:
            raise VolumeError("variance volume has negative entries")
        if self.kind == "label" and num_classes is not None and self.data.size:
            top = int(self.data.max())
            if top >= num_classes:
                raise VolumeError(
                    f"label volume contains value {top} but only "
                    f"{num_classes} classes exist")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.kind == other.kind and self.spacing == other.spacing
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


def as_intensity(data, spacing=()) -> Volume:
    return Volume(np.ascontiguousarray(data, dtype="<f4"), spacing, "intensity")


def as_variance(data, spacing=()) -> Volume:
    return Volume(np.ascontiguousarray(data, dtype="<f4"), spacing, "variance")


def as_label(data, spacing=()) -> Volume:
    return Volume(np.ascontiguousarray(data, dtype="u1"), spacing, "label")


def _base_path(path) -> Path:
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p


def write_volume(vol: Volume, path) -> None:
    """Write ``<base>.bin`` + ``<base>.json`` for a valid volume."""
    vol.validate()
    base = _base_path(path)
    tag = _TAG_FOR_KIND[vol.kind]
    payload = np.ascontiguousarray(vol.data, dtype=_DTYPE_TAGS[tag])
    header = {
        "shape": list(vol.shape),
        "dtype": tag,
        "spacing": list(vol.spacing),
        "order": "row-major",
        "kind": vol.kind,
    }
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".bin").write_bytes(payload.tobytes())
    base.with_suffix(".json").write_text(
        json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")


def read_volume(path, num_classes: int | None = None) -> Volume:
    """Read a volume pair; validates header/payload consistency.

    When ``num_classes`` is given, label volumes are range-checked on read.
    """
    base = _base_path(path)
    json_path, bin_path = base.with_suffix(".json"), base.with_suffix(".bin")
    try:
        header = json.loads(json_path.read_text())
    except FileNotFoundError:
        raise VolumeError(f"missing sidecar {json_path}") from None
    except json.JSONDecodeError as exc:
        raise VolumeError(f"malformed sidecar {json_path}: {exc}") from None

    for key in ("shape", "dtype", "spacing", "kind"):
        if key not in header:
            raise VolumeError(f"sidecar {json_path} lacks field {key!r}")
    tag = header["dtype"]
    if tag not in _DTYPE_TAGS:
        raise VolumeError(f"unknown dtype tag {tag!r} in {json_path}")
    kind = header["kind"]
    if kind not in KINDS:
        raise VolumeError(f"unknown kind {kind!r} in {json_path}")
    if _TAG_FOR_KIND[kind] != tag:
        raise VolumeError(f"kind {kind!r} is incompatible with dtype {tag!r}")
    if header.get("order", "row-major") != "row-major":
        raise VolumeError(f"unsupported storage order {header.get('order')!r}")

    shape = tuple(int(s) for s in header["shape"])
    dtype = _DTYPE_TAGS[tag]
    try:
        raw = bin_path.read_bytes()
    except FileNotFoundError:
        raise VolumeError(f"missing payload {bin_path}") from None
    expect = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expect:
        raise VolumeError(
            f"{bin_path}: header promises {expect} bytes, payload has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    vol = Volume(data, tuple(header["spacing"]), kind)
    vol.validate(num_classes=num_classes)
    return vol
