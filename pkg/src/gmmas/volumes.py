"""Volume data model, file I/O and dataset manifests.

Two on-disk formats are supported:

* raw: ``<case>.f32`` (little-endian float32, C-order, modality-major) next to
  a ``<case>.json`` sidecar with keys ``shape``, ``spacing_mm``, ``modalities``
  and ``presence``.  Round-trips bit-exactly and needs no third-party reader.
* NIfTI-1: one single-frame ``.nii``/``.nii.gz`` file per modality using the
  suffix convention ``_t1 / _t1ce / _t2 / _flair`` (plus ``_seg`` for masks).
  Written with a minimal header; intensities are min-max normalized on load.

Segmentation masks are stored as ``<case>.u8`` + sidecar in the raw format.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError, VolumeIOError

MODALITIES = ("t1", "t1ce", "t2", "flair")
N_MODALITIES = 4

#: segmentation label convention: 0 background, 1 necrosis, 2 enhancing, 3 edema
N_SEG_CLASSES = 4
LABEL_NECROSIS = 1
LABEL_ENHANCING = 2
LABEL_EDEMA = 3

#: evaluation regions as label sets
REGIONS = {
    "whole": (1, 2, 3),
    "core": (1, 2),
    "edema": (3,),
}

SPLITS = ("train", "val", "test", "unlabeled")

#: classification task keys, in fixed reporting order
TASKS = ("grade", "idh", "1p19q", "mgmt")


def _check_spatial_shape(shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3:
        raise ValidationError(f"expected 3 spatial dims, got {shape}")
    for s in shape:
        if s < 8 or s % 8 != 0:
            raise ValidationError(
                f"spatial dims must be >= 8 and divisible by 8, got {shape}"
            )
    return shape


@dataclass(frozen=True)
class MultimodalVolume:
    """A 4-modality scan with per-modality presence mask.

    ``voxels`` has shape [4, H, W, D]; absent modalities are zero-filled and
    flagged false in ``modality_presence``.  Instances are immutable: arrays
    are marked read-only after validation.
    """

    voxels: np.ndarray
    modality_presence: tuple[bool, bool, bool, bool]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 4 or vox.shape[0] != N_MODALITIES:
            raise ValidationError(f"voxels must be [4, H, W, D], got {vox.shape}")
        _check_spatial_shape(vox.shape[1:])
        if not np.isfinite(vox).all():
            raise ValidationError("voxel intensities must be finite")
        presence = tuple(bool(p) for p in self.modality_presence)
        if len(presence) != N_MODALITIES:
            raise ValidationError("modality_presence must have 4 entries")
        for m, present in enumerate(presence):
            if not present and np.any(vox[m]):
                raise ValidationError(
                    f"absent modality '{MODALITIES[m]}' must be zero-filled"
                )
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "modality_presence", presence)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape[1:]


@dataclass(frozen=True)
class SegmentationMask:
    """Per-voxel labels in {0: background, 1: necrosis, 2: enhancing, 3: edema}."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValidationError(f"mask must be [H, W, D], got {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= N_SEG_CLASSES):
            raise ValidationError(
                f"mask values must lie in [0, {N_SEG_CLASSES - 1}], "
                f"got range [{lab.min()}, {lab.max()}]"
            )
        lab = lab.astype(np.uint8)
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class CaseLabels:
    """Per-task binary labels; any subset may be absent (None)."""

    grade: int | None = None
    idh: int | None = None
    del_1p19q: int | None = None
    mgmt: int | None = None

    def __post_init__(self):
        for name in ("grade", "idh", "del_1p19q", "mgmt"):
            v = getattr(self, name)
            if v is not None and v not in (0, 1):
                raise ValidationError(f"label '{name}' must be 0, 1 or None, got {v}")

    def as_dict(self) -> dict[str, int | None]:
        return {
            "grade": self.grade,
            "idh": self.idh,
            "1p19q": self.del_1p19q,
            "mgmt": self.mgmt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaseLabels":
        return cls(
            grade=d.get("grade"),
            idh=d.get("idh"),
            del_1p19q=d.get("1p19q", d.get("del_1p19q")),
            mgmt=d.get("mgmt"),
        )

    def is_empty(self) -> bool:
        return all(v is None for v in self.as_dict().values())


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    volume_path: str
    mask_path: str | None
    labels: CaseLabels
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got '{self.split}'")


@dataclass
class DatasetManifest:
    """List of cases with paths, labels and split tags.

    Case ids are unique across splits; paths resolve relative to the manifest
    base directory when not absolute.
    """

    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: str = "."

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.case_id in seen:
                raise ValidationError(f"duplicate case_id '{e.case_id}' in manifest")
            seen.add(e.case_id)

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_json(self) -> str:
        records = [
            {
                "case_id": e.case_id,
                "volume": e.volume_path,
                "mask": e.mask_path,
                "labels": e.labels.as_dict(),
                "split": e.split,
            }
            for e in self.entries
        ]
        return json.dumps(records, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path, check_paths: bool = True) -> "DatasetManifest":
        path = Path(path)
        records = json.loads(path.read_text())
        entries = [
            ManifestEntry(
                case_id=r["case_id"],
                volume_path=r["volume"],
                mask_path=r.get("mask"),
                labels=CaseLabels.from_dict(r.get("labels") or {}),
                split=r["split"],
            )
            for r in records
        ]
        manifest = cls(entries=entries, base_dir=str(path.parent))
        if check_paths:
            for e in entries:
                vp = manifest.resolve(e.volume_path)
                if not _raw_data_file(vp).exists() and not _nifti_candidates(vp):
                    raise ValidationError(f"volume path not resolvable: {vp}")
        return manifest


# ---------------------------------------------------------------------------
# intensity normalization


def normalize_intensities(voxels: np.ndarray, presence) -> np.ndarray:
    """Min-max normalize each present modality to [0, 1] over nonzero voxels.

    Zero voxels (background / absent planes) are left at zero; a modality with
    constant nonzero intensity maps to all zeros (degenerate range rule).
    """
    out = np.zeros_like(voxels, dtype=np.float32)
    for m in range(voxels.shape[0]):
        if not presence[m]:
            continue
        plane = voxels[m]
        nz = plane != 0
        if not nz.any():
            continue
        vals = plane[nz]
        lo, hi = float(vals.min()), float(vals.max())
        if hi > lo:
            out[m][nz] = (vals - lo) / (hi - lo)
        # hi == lo: constant modality stays all zeros
    return out


# ---------------------------------------------------------------------------
# raw format

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _raw_data_file(path: Path) -> Path:
    if path.suffix in (".f32", ".u8"):
        return path
    return path.with_suffix(".f32")


def _save_raw_volume(volume: MultimodalVolume, path: Path) -> None:
    data = np.ascontiguousarray(volume.voxels, dtype="<f4")
    sidecar = {
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing),
        "modalities": list(MODALITIES),
        "presence": list(volume.modality_presence),
    }
    try:
        path.write_bytes(data.tobytes())
        _sidecar_path(path).write_text(json.dumps(sidecar, indent=2))
    except OSError as exc:
        raise VolumeIOError(f"cannot write volume to {path}: {exc}") from exc


def _load_raw_volume(path: Path, case_id: str) -> MultimodalVolume:
    sidecar_file = _sidecar_path(path)
    try:
        meta = json.loads(sidecar_file.read_text())
        blob = path.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read volume at {path}: {exc}") from exc
    shape = tuple(meta["shape"])
    expected = N_MODALITIES * int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise ValidationError(
            f"{path}: payload has {len(blob)} bytes, sidecar shape {shape} "
            f"implies {expected}"
        )
    vox = np.frombuffer(blob, dtype="<f4").reshape((N_MODALITIES,) + shape)
    return MultimodalVolume(
        voxels=vox.copy(),
        modality_presence=tuple(meta["presence"]),
        spacing=tuple(meta.get("spacing_mm", (1.0, 1.0, 1.0))),
        case_id=case_id,
    )


def _save_raw_mask(mask: SegmentationMask, path: Path) -> None:
    if path.suffix != ".u8":
        path = path.with_suffix(".u8")
    sidecar = {"shape": list(mask.shape), "spacing_mm": [1.0, 1.0, 1.0]}
    try:
        path.write_bytes(np.ascontiguousarray(mask.labels, dtype=np.uint8).tobytes())
        _sidecar_path(path).write_text(json.dumps(sidecar, indent=2))
    except OSError as exc:
        raise VolumeIOError(f"cannot write mask to {path}: {exc}") from exc


def _load_raw_mask(path: Path) -> SegmentationMask:
    try:
        meta = json.loads(_sidecar_path(path).read_text())
        blob = path.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read mask at {path}: {exc}") from exc
    shape = tuple(meta["shape"])
    lab = np.frombuffer(blob, dtype=np.uint8).reshape(shape)
    return SegmentationMask(labels=lab.copy())


# ---------------------------------------------------------------------------
# minimal NIfTI-1 support (single-frame float32 / uint8, no extensions)

_NIFTI_DTYPES = {16: np.dtype("<f4"), 2: np.dtype("uint8"), 4: np.dtype("<i2"), 8: np.dtype("<i4"), 64: np.dtype("<f8")}
_NIFTI_CODES = {np.dtype("float32"): (16, 32), np.dtype("uint8"): (2, 8)}


def _nifti_open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def write_nifti(array: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a 3D array as a minimal single-frame NIfTI-1 file."""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValidationError(f"NIfTI writer expects a 3D array, got {array.shape}")
    if array.dtype not in _NIFTI_CODES:
        array = array.astype(np.float32)
    datatype, bitpix = _NIFTI_CODES[array.dtype]

    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)                      # sizeof_hdr
    dims = (3,) + array.shape + (1, 1, 1, 1)
    struct.pack_into("<8h", header, 40, *dims)                  # dim
    struct.pack_into("<h", header, 70, datatype)                # datatype
    struct.pack_into("<h", header, 72, bitpix)                  # bitpix
    pixdim = (1.0,) + tuple(float(s) for s in spacing) + (1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<8f", header, 76, *pixdim)                # pixdim
    struct.pack_into("<f", header, 108, 352.0)                  # vox_offset
    struct.pack_into("<f", header, 112, 1.0)                    # scl_slope
    header[344:348] = b"n+1\x00"                                # magic
    try:
        with _nifti_open(path, "wb") as f:
            f.write(bytes(header))
            f.write(b"\x00\x00\x00\x00")                        # extension flag
            f.write(array.tobytes(order="F"))
    except OSError as exc:
        raise VolumeIOError(f"cannot write NIfTI to {path}: {exc}") from exc


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a 3D NIfTI-1 file; returns (array, spacing)."""
    path = Path(path)
    try:
        with _nifti_open(path, "rb") as f:
            header = f.read(348)
            if len(header) < 348:
                raise ValidationError(f"{path}: truncated NIfTI header")
            magic = header[344:348]
            if magic not in (b"n+1\x00", b"ni1\x00"):
                raise ValidationError(f"{path}: not a NIfTI-1 file (magic {magic!r})")
            dim = struct.unpack_from("<8h", header, 40)
            datatype = struct.unpack_from("<h", header, 70)[0]
            pixdim = struct.unpack_from("<8f", header, 76)
            vox_offset = int(struct.unpack_from("<f", header, 108)[0])
            if datatype not in _NIFTI_DTYPES:
                raise ValidationError(f"{path}: unsupported NIfTI datatype {datatype}")
            ndim = dim[0]
            shape = tuple(dim[1 : 1 + ndim])
            if ndim > 3 and any(s > 1 for s in dim[4 : 1 + ndim]):
                raise ValidationError(f"{path}: expected a single-frame 3D image, dim={dim}")
            shape = shape[:3]
            f.read(max(vox_offset - 348, 0))
            dtype = _NIFTI_DTYPES[datatype]
            payload = f.read(int(np.prod(shape)) * dtype.itemsize)
    except OSError as exc:
        raise VolumeIOError(f"cannot read NIfTI at {path}: {exc}") from exc
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    return arr.copy(), tuple(float(p) for p in pixdim[1:4])


def _nifti_candidates(prefix: Path) -> dict[str, Path]:
    """Per-modality NIfTI files found for a case prefix."""
    found = {}
    for mod in MODALITIES:
        for ext in (".nii", ".nii.gz"):
            p = prefix.parent / f"{prefix.name}_{mod}{ext}"
            if p.exists():
                found[mod] = p
                break
    return found


def _load_nifti_volume(prefix: Path, case_id: str) -> MultimodalVolume:
    files = _nifti_candidates(prefix)
    if not files:
        raise VolumeIOError(f"no modality files found for prefix {prefix}")
    planes: dict[str, np.ndarray] = {}
    spacing = (1.0, 1.0, 1.0)
    shape = None
    for mod, p in files.items():
        arr, spacing = read_nifti(p)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValidationError(
                f"modality shape mismatch: '{mod}' has {arr.shape}, expected {shape}"
            )
        planes[mod] = arr.astype(np.float32)
    vox = np.zeros((N_MODALITIES,) + shape, dtype=np.float32)
    presence = []
    for m, mod in enumerate(MODALITIES):
        present = mod in planes
        presence.append(present)
        if present:
            vox[m] = planes[mod]
    vox = normalize_intensities(vox, presence)
    return MultimodalVolume(
        voxels=vox,
        modality_presence=tuple(presence),
        spacing=spacing,
        case_id=case_id,
    )


# ---------------------------------------------------------------------------
# public load/save entry points


def load_volume(path, normalize: bool | None = None) -> MultimodalVolume:
    """Load a multimodal volume from the raw format or per-modality NIfTI files.

    ``path`` is either a ``.f32`` file (or its extension-less prefix) or a case
    prefix with ``_t1/_t1ce/_t2/_flair`` NIfTI files next to it.  The presence
    mask reflects which modality files were found.  NIfTI intensities are
    min-max normalized per modality; raw payloads are stored already
    normalized and load bit-exactly (override with ``normalize=True``).
    """
    path = Path(path)
    case_id = path.stem
    raw = _raw_data_file(path)
    if raw.exists():
        vol = _load_raw_volume(raw, case_id)
        if normalize:
            vox = normalize_intensities(vol.voxels, vol.modality_presence)
            vol = MultimodalVolume(vox, vol.modality_presence, vol.spacing, vol.case_id)
        return vol
    if path.suffix in (".nii", ".gz"):
        # a single explicit NIfTI file: treat its stem-minus-suffix as prefix
        name = path.name
        for mod in MODALITIES:
            for ext in (".nii", ".nii.gz"):
                if name.endswith(f"_{mod}{ext}"):
                    prefix = path.parent / name[: -len(f"_{mod}{ext}")]
                    return _load_nifti_volume(prefix, prefix.name)
        raise VolumeIOError(f"{path}: NIfTI file does not follow the modality suffix convention")
    if _nifti_candidates(path):
        return _load_nifti_volume(path, case_id)
    raise VolumeIOError(f"no volume found at {path}")


def load_mask(path) -> SegmentationMask:
    """Load a segmentation mask (raw ``.u8`` or ``_seg`` NIfTI)."""
    path = Path(path)
    if path.suffix == ".u8" or path.with_suffix(".u8").exists():
        return _load_raw_mask(path if path.suffix == ".u8" else path.with_suffix(".u8"))
    if path.exists():
        arr, _ = read_nifti(path)
        return SegmentationMask(labels=arr.astype(np.uint8))
    for ext in (".nii", ".nii.gz"):
        p = path.parent / f"{path.name}_seg{ext}"
        if p.exists():
            arr, _ = read_nifti(p)
            return SegmentationMask(labels=arr.astype(np.uint8))
    raise VolumeIOError(f"no mask found at {path}")


def save_volume(obj: MultimodalVolume | SegmentationMask, path) -> None:
    """Save a volume or mask; format chosen from the path extension.

    ``.f32``/``.u8`` (or extension-less) selects the raw format; ``.nii`` /
    ``.nii.gz`` writes NIfTI (per-modality files for volumes, using ``path``
    as the case prefix).
    """
    path = Path(path)
    nifti = str(path).endswith((".nii", ".nii.gz"))
    if isinstance(obj, MultimodalVolume):
        if nifti:
            name = path.name
            for ext in (".nii.gz", ".nii"):
                if name.endswith(ext):
                    prefix, suffix = name[: -len(ext)], ext
                    break
            for m, mod in enumerate(MODALITIES):
                if obj.modality_presence[m]:
                    write_nifti(obj.voxels[m], path.parent / f"{prefix}_{mod}{suffix}", obj.spacing)
        else:
            _save_raw_volume(obj, _raw_data_file(path))
    elif isinstance(obj, SegmentationMask):
        if nifti:
            write_nifti(obj.labels, path)
        else:
            _save_raw_mask(obj, path)
    else:
        raise ValidationError(f"cannot save object of type {type(obj).__name__}")
