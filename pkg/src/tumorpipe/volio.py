"""NIfTI-1 volume I/O, case manifests and geometry checks.

Only the single-file NIfTI-1 subset used by the challenge data is supported
(``.nii`` / ``.nii.gz``, little-endian, 3D, uint8/int16/int32/float32).
Arrays are indexed ``[x, y, z]``; on disk the x axis varies fastest.
"""
from __future__ import annotations

import csv
import gzip
import io
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LABEL = "label"
PROBABILITY = "probability"
INTENSITY = "intensity"
KINDS = (LABEL, PROBABILITY, INTENSITY)

PROB_TOLERANCE = 1e-6
SPACING_TOLERANCE = 1e-4

# NIfTI datatype code -> little-endian numpy dtype
DATATYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
}
_CODE_OF_DTYPE = {v: k for k, v in DATATYPES.items()}

_HEADER_SIZE = 348
_VOX_OFFSET = 352


class VolumeFormatError(ValueError):
    """Malformed or unsupported NIfTI file."""


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class VolumeValidationError(ValueError):
    """Voxel values violate the declared volume kind."""


@dataclass(frozen=True)
class Affine:
    """Orientation metadata carried through load/save untouched."""

    qform_code: int = 0
    sform_code: int = 0
    qfac: float = 1.0
    quatern: tuple[float, float, float] = (0.0, 0.0, 0.0)
    qoffset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    srow_x: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    srow_y: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 0.0)
    srow_z: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 0.0)
    xyzt_units: int = 2


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D grid with voxel spacing in mm.

    ``data`` is marked read-only; derive new volumes with :meth:`with_data`.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = LABEL
    affine: Affine = field(default_factory=Affine)

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise VolumeValidationError(f"expected 3D data, got shape {self.data.shape}")
        if self.kind not in KINDS:
            raise VolumeValidationError(f"unknown volume kind {self.kind!r}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise VolumeValidationError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        view = np.asarray(self.data).view()
        view.setflags(write=False)  # freezes this view only, not the caller's array
        object.__setattr__(self, "data", view)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "Volume":
        return replace(self, data=np.asarray(data), kind=kind or self.kind)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class GeometryReport:
    consistent: bool
    dims_equal: bool
    spacing_equal: bool
    mismatched_axes: tuple[int, ...] = ()
    messages: tuple[str, ...] = ()


def check_geometry(volumes: Sequence[Volume], tol: float = SPACING_TOLERANCE) -> GeometryReport:
    """Compare dims and spacing of every volume against the first one."""
    if not volumes:
        raise ValueError("check_geometry needs at least one volume")
    ref = volumes[0]
    axes: set[int] = set()
    msgs = []
    dims_ok = spacing_ok = True
    for i, v in enumerate(volumes[1:], start=1):
        for ax in range(3):
            if v.dims[ax] != ref.dims[ax]:
                dims_ok = False
                axes.add(ax)
                msgs.append(f"volume {i}: dims differ on axis {'xyz'[ax]} ({ref.dims[ax]} vs {v.dims[ax]})")
            if abs(v.spacing[ax] - ref.spacing[ax]) > tol:
                spacing_ok = False
                axes.add(ax)
                msgs.append(
                    f"volume {i}: spacing differs on axis {'xyz'[ax]} ({ref.spacing[ax]} vs {v.spacing[ax]})"
                )
    return GeometryReport(dims_ok and spacing_ok, dims_ok, spacing_ok, tuple(sorted(axes)), tuple(msgs))


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except OSError as exc:
            raise VolumeFormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_header(buf: bytes, path: Path) -> dict:
    if len(buf) < _HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != _HEADER_SIZE:
        if struct.unpack_from(">i", buf, 0)[0] == _HEADER_SIZE:
            raise VolumeFormatError(f"{path}: big-endian NIfTI is not supported")
        raise VolumeFormatError(f"{path}: bad sizeof_hdr {sizeof_hdr}")
    magic = buf[344:348]
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"{path}: not a single-file NIfTI-1 image (magic {magic!r})")
    dim = struct.unpack_from("<8h", buf, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise VolumeFormatError(f"{path}: expected a 3D image, got dim={dim}")
    dims = dim[1:4]
    if any(d <= 0 for d in dims):
        raise VolumeFormatError(f"{path}: non-positive dimension in {dims}")
    (datatype, bitpix) = struct.unpack_from("<hh", buf, 70)
    pixdim = struct.unpack_from("<8f", buf, 76)
    (vox_offset, scl_slope, scl_inter) = struct.unpack_from("<3f", buf, 108)
    (xyzt_units,) = struct.unpack_from("<B", buf, 123)
    (qform_code, sform_code) = struct.unpack_from("<hh", buf, 252)
    q = struct.unpack_from("<6f", buf, 256)
    srow = struct.unpack_from("<12f", buf, 280)
    return {
        "dims": dims,
        "datatype": datatype,
        "bitpix": bitpix,
        "spacing": tuple(float(p) for p in pixdim[1:4]),
        "vox_offset": int(vox_offset),
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "affine": Affine(
            qform_code=qform_code,
            sform_code=sform_code,
            qfac=-1.0 if pixdim[0] < 0 else 1.0,
            quatern=tuple(q[0:3]),
            qoffset=tuple(q[3:6]),
            srow_x=tuple(srow[0:4]),
            srow_y=tuple(srow[4:8]),
            srow_z=tuple(srow[8:12]),
            xyzt_units=xyzt_units,
        ),
    }


def load_volume(
    path: str | Path,
    expected_kind: str = LABEL,
    allowed_labels: Iterable[int] | None = None,
) -> Volume:
    """Read a NIfTI-1 file into a :class:`Volume`.

    Integer files loaded as ``probability`` are rejected rather than rescaled.
    When ``allowed_labels`` is given, label volumes containing any other
    nonzero code raise :class:`VolumeValidationError`.
    """
    path = Path(path)
    if expected_kind not in KINDS:
        raise ValueError(f"unknown volume kind {expected_kind!r}")
    buf = _read_bytes(path)
    hdr = _parse_header(buf, path)
    dtype = DATATYPES.get(hdr["datatype"])
    if dtype is None:
        raise UnsupportedDatatypeError(f"{path}: unsupported NIfTI datatype code {hdr['datatype']}")
    if hdr["bitpix"] != dtype.itemsize * 8:
        raise VolumeFormatError(f"{path}: bitpix {hdr['bitpix']} does not match datatype")
    nvox = int(np.prod(hdr["dims"]))
    offset = hdr["vox_offset"]
    if offset < _HEADER_SIZE or offset + nvox * dtype.itemsize > len(buf):
        raise VolumeFormatError(f"{path}: truncated voxel data")
    data = np.frombuffer(buf, dtype=dtype, count=nvox, offset=offset).reshape(hdr["dims"], order="F")

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    scaled = slope not in (0.0, 1.0) or inter != 0.0
    if expected_kind == LABEL:
        if dtype.kind == "f":
            raise VolumeValidationError(f"{path}: label volume stored as floating point")
        if scaled:
            raise VolumeValidationError(f"{path}: label volume carries intensity scaling")
        if allowed_labels is not None:
            bad = np.setdiff1d(np.unique(data), np.array(sorted({0, *allowed_labels})))
            if bad.size:
                raise VolumeValidationError(f"{path}: undeclared label values {bad.tolist()}")
    elif expected_kind == PROBABILITY:
        if dtype.kind != "f":
            raise VolumeValidationError(f"{path}: integer data cannot be read as probabilities")
        if scaled:
            data = data * np.float32(slope or 1.0) + np.float32(inter)
        lo, hi = float(data.min()), float(data.max())
        if lo < -PROB_TOLERANCE or hi > 1 + PROB_TOLERANCE or not np.isfinite(data).all():
            raise VolumeValidationError(f"{path}: probabilities outside [0, 1] (range {lo}..{hi})")
    elif scaled:
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)

    return Volume(data=data, spacing=hdr["spacing"], kind=expected_kind, affine=hdr["affine"])


def _encode(v: Volume, dtype: np.dtype, description: str = "") -> bytes:
    a = v.affine
    hdr = bytearray(_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    descrip = description.encode("ascii")
    if len(descrip) > 79:
        raise ValueError(f"description longer than 79 bytes: {description!r}")
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, _CODE_OF_DTYPE[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, a.qfac, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(_VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, a.xyzt_units)
    struct.pack_into("<hh", hdr, 252, a.qform_code, a.sform_code)
    struct.pack_into("<6f", hdr, 256, *a.quatern, *a.qoffset)
    struct.pack_into("<12f", hdr, 280, *a.srow_x, *a.srow_y, *a.srow_z)
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(v.data, dtype=dtype).tobytes(order="F")
    return bytes(hdr) + body


def _write(path: Path, payload: bytes, compresslevel: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        out = io.BytesIO()
        # mtime=0 keeps outputs byte-identical across runs
        with gzip.GzipFile(filename="", mode="wb", fileobj=out, compresslevel=compresslevel, mtime=0) as gz:
            gz.write(payload)
        payload = out.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)


def _label_dtype(data: np.ndarray) -> np.dtype:
    if data.size == 0:
        return DATATYPES[2]
    lo, hi = int(data.min()), int(data.max())
    if lo >= 0 and hi <= 255:
        return DATATYPES[2]
    if lo >= -(2**15) and hi < 2**15:
        return DATATYPES[4]
    return DATATYPES[8]


def save_label_volume(v: Volume, path: str | Path, compresslevel: int = 1, description: str = "") -> None:
    """Write with the narrowest integer type that holds the values.

    ``description`` goes into the header's 80-byte ``descrip`` field.
    """
    if v.kind != LABEL:
        raise ValueError(f"save_label_volume needs a label volume, got {v.kind}")
    if v.data.dtype.kind not in "iub":
        raise ValueError("label data must be integer")
    _write(Path(path), _encode(v, _label_dtype(v.data), description), compresslevel)


def save_float_volume(v: Volume, path: str | Path, compresslevel: int = 1, description: str = "") -> None:
    """Write probability or intensity volumes as float32."""
    _write(Path(path), _encode(v, DATATYPES[16], description), compresslevel)


def save_volume(v: Volume, path: str | Path, compresslevel: int = 1, description: str = "") -> None:
    if v.kind == LABEL:
        save_label_volume(v, path, compresslevel, description)
    else:
        save_float_volume(v, path, compresslevel, description)


def read_description(path: str | Path) -> str:
    """The header ``descrip`` text of a NIfTI file."""
    path = Path(path)
    buf = _read_bytes(path)
    _parse_header(buf, path)
    return buf[148:228].split(b"\x00", 1)[0].decode("ascii", errors="replace")


# ---------------------------------------------------------------------------
# manifests


@dataclass
class CaseManifest:
    case_id: str
    reference_path: Path | None = None
    image_paths: dict[str, Path] = field(default_factory=dict)
    candidate_paths: dict[str, Path] = field(default_factory=dict)
    fold: int | None = None
    cluster: int | None = None

    def missing_paths(self) -> list[Path]:
        paths = list(self.image_paths.values()) + list(self.candidate_paths.values())
        if self.reference_path is not None:
            paths.append(self.reference_path)
        return [p for p in paths if not p.exists()]

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "reference": str(self.reference_path) if self.reference_path else None,
            "images": {k: str(v) for k, v in self.image_paths.items()},
            "candidates": {k: str(v) for k, v in self.candidate_paths.items()},
            "fold": self.fold,
            "cluster": self.cluster,
        }


def _opt_int(value) -> int | None:
    if value is None or value == "":
        return None
    return int(value)


def _resolve(base: Path, p: str | None) -> Path | None:
    if not p:
        return None
    path = Path(p)
    return path if path.is_absolute() else base / path


def load_manifest(path: str | Path, check_paths: bool = True) -> list[CaseManifest]:
    """Read a JSON or CSV manifest. Relative paths resolve against its directory.

    CSV columns: ``case_id, reference, candidate:<id>, image:<seq>, fold, cluster``.
    JSON: a list of objects (or ``{"cases": [...]}``) with keys
    ``case_id, reference, candidates, images, fold, cluster``.
    """
    path = Path(path)
    base = path.parent
    cases: list[CaseManifest] = []
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                cases.append(
                    CaseManifest(
                        case_id=row["case_id"],
                        reference_path=_resolve(base, row.get("reference")),
                        image_paths={
                            k.split(":", 1)[1]: _resolve(base, v) for k, v in row.items() if k.startswith("image:") and v
                        },
                        candidate_paths={
                            k.split(":", 1)[1]: _resolve(base, v)
                            for k, v in row.items()
                            if k.startswith("candidate:") and v
                        },
                        fold=_opt_int(row.get("fold")),
                        cluster=_opt_int(row.get("cluster")),
                    )
                )
    else:
        payload = json.loads(path.read_text())
        if isinstance(payload, dict):
            payload = payload["cases"]
        for row in payload:
            cases.append(
                CaseManifest(
                    case_id=row["case_id"],
                    reference_path=_resolve(base, row.get("reference")),
                    image_paths={k: _resolve(base, v) for k, v in (row.get("images") or {}).items()},
                    candidate_paths={k: _resolve(base, v) for k, v in (row.get("candidates") or {}).items()},
                    fold=_opt_int(row.get("fold")),
                    cluster=_opt_int(row.get("cluster")),
                )
            )
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"{path}: duplicate case ids {dup}")
    if check_paths:
        for c in cases:
            missing = c.missing_paths()
            if missing:
                raise FileNotFoundError(f"case {c.case_id}: missing files {[str(m) for m in missing]}")
    return cases


def _relative(cases: Sequence[CaseManifest], base: Path) -> list[CaseManifest]:
    def rel(p: Path | None) -> Path | None:
        if p is None:
            return None
        try:
            return Path(os.path.relpath(Path(p).resolve(), base.resolve()))
        except ValueError:  # different drive
            return Path(p)

    return [
        replace(
            c,
            reference_path=rel(c.reference_path),
            image_paths={k: rel(v) for k, v in c.image_paths.items()},
            candidate_paths={k: rel(v) for k, v in c.candidate_paths.items()},
        )
        for c in cases
    ]


def save_manifest(cases: Sequence[CaseManifest], path: str | Path, extra: dict | None = None) -> None:
    """Write JSON or CSV (by suffix); paths are stored relative to the manifest.

    ``extra`` keys are added next to ``cases`` in JSON output.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cases = _relative(cases, path.parent)
    if path.suffix.lower() == ".csv":
        cands = sorted({k for c in cases for k in c.candidate_paths})
        seqs = sorted({k for c in cases for k in c.image_paths})
        cols = ["case_id", "reference"] + [f"candidate:{k}" for k in cands] + [f"image:{k}" for k in seqs]
        cols += ["fold", "cluster"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for c in cases:
                w.writerow(
                    [c.case_id, c.reference_path or ""]
                    + [c.candidate_paths.get(k, "") for k in cands]
                    + [c.image_paths.get(k, "") for k in seqs]
                    + ["" if c.fold is None else c.fold, "" if c.cluster is None else c.cluster]
                )
    else:
        path.write_text(json.dumps({**(extra or {}), "cases": [c.to_json() for c in cases]}, indent=1) + "\n")
