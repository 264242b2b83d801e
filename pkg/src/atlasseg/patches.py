"""2D tissue patches tiled from the slices of a volume and its label map."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PairingError, SettingsError
from .volume import LabelVolume, Volume

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Patch:
    image: np.ndarray  # float32 (rows, cols)
    labels: np.ndarray  # uint8 (rows, cols)
    case: str
    slice_index: int
    row: int
    col: int


@dataclass
class PatchSet:
    patch_size: tuple
    stride: tuple
    axis: str
    min_tissue: int
    patches: list = field(default_factory=list)

    def __len__(self):
        return len(self.patches)

    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.patches]) if self.patches else np.zeros((0,) + self.patch_size,
                                                                                      np.float32)

    def label_patches(self) -> np.ndarray:
        return np.stack([p.labels for p in self.patches]) if self.patches else np.zeros((0,) + self.patch_size,
                                                                                       np.uint8)

    def manifest(self) -> dict:
        cases = sorted({p.case for p in self.patches})
        return {
            "patch_size": list(self.patch_size),
            "stride": list(self.stride),
            "axis": self.axis,
            "min_tissue": self.min_tissue,
            "count": len(self.patches),
            "cases": cases,
            "offsets": [[p.slice_index, p.row, p.col] for p in self.patches],
        }

    def save(self, directory, name: str = "patches") -> Path:
        """Write ``<name>.npz`` (images, labels, offsets) and ``<name>.json`` (manifest)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        offsets = np.array([[p.slice_index, p.row, p.col] for p in self.patches], dtype=np.int64).reshape(-1, 3)
        cases = np.array([p.case for p in self.patches], dtype=str)
        with open(d / f"{name}.npz", "wb") as fh:
            np.savez_compressed(fh, images=self.images(), labels=self.label_patches(), offsets=offsets, cases=cases)
        (d / f"{name}.json").write_text(json.dumps(self.manifest(), indent=2) + "\n")
        return d

    @classmethod
    def load(cls, directory, name: str = "patches") -> "PatchSet":
        d = Path(directory)
        man = json.loads((d / f"{name}.json").read_text())
        with np.load(d / f"{name}.npz") as z:
            images, labels, offsets, cases = z["images"], z["labels"], z["offsets"], z["cases"]
        patches = [Patch(images[i], labels[i], str(cases[i]), *map(int, offsets[i])) for i in range(len(images))]
        return cls(tuple(man["patch_size"]), tuple(man["stride"]), man["axis"], man["min_tissue"], patches)


def _pair(v, name):
    t = (int(v), int(v)) if np.isscalar(v) else tuple(int(x) for x in v)
    if len(t) != 2 or min(t) < 1:
        raise SettingsError(f"{name} must be one or two positive integers")
    return t


def iter_tiles(volume: Volume, labels: LabelVolume, size=(32, 32), stride=(32, 32), axis: str = "z",
               case: str = "case"):
    """Yield every tile ``Patch`` of every slice in (slice, row, col) order, zero-padded at borders."""
    if axis not in AXES:
        raise SettingsError(f"axis must be one of {sorted(AXES)}")
    if not volume.geometry.isclose(labels.geometry):
        raise PairingError("volume and labels have different geometry")
    size, stride = _pair(size, "size"), _pair(stride, "stride")
    a = AXES[axis]
    img = np.moveaxis(volume.data, a, 0)
    lab = np.moveaxis(labels.data, a, 0)
    _, nr, nc = img.shape
    for k in range(img.shape[0]):
        for r in range(0, nr, stride[0]):
            for c in range(0, nc, stride[1]):
                pi = np.zeros(size, dtype=np.float32)
                pl = np.zeros(size, dtype=np.uint8)
                src_i = img[k, r:r + size[0], c:c + size[1]]
                pi[:src_i.shape[0], :src_i.shape[1]] = src_i
                pl[:src_i.shape[0], :src_i.shape[1]] = lab[k, r:r + size[0], c:c + size[1]]
                yield Patch(pi, pl, case, k, r, c)


def extract_patches(volume: Volume, labels: LabelVolume, size=(32, 32), stride=(32, 32), axis: str = "z",
                    min_tissue: int = 1, case: str = "case") -> PatchSet:
    """Keep the tiles whose label footprint has at least ``min_tissue`` non-background voxels."""
    if int(min_tissue) < 1:
        raise SettingsError("min_tissue must be >= 1")
    size, stride = _pair(size, "size"), _pair(stride, "stride")
    kept = [p for p in iter_tiles(volume, labels, size, stride, axis, case)
            if np.count_nonzero(p.labels) >= min_tissue]
    return PatchSet(size, stride, axis, int(min_tissue), kept)


def reassemble(tiles, shape, axis: str = "z", field: str = "image") -> np.ndarray:
    """Paste tiles back into a volume of ``shape`` (inverse of :func:`iter_tiles` when stride == size)."""
    a = AXES[axis]
    out = np.moveaxis(np.zeros(shape, dtype=np.float32 if field == "image" else np.uint8), a, 0)
    _, nr, nc = out.shape
    for p in tiles:
        arr = getattr(p, field)
        h, w = min(arr.shape[0], nr - p.row), min(arr.shape[1], nc - p.col)
        out[p.slice_index, p.row:p.row + h, p.col:p.col + w] = arr[:h, :w]
    return np.moveaxis(out, 0, a)
