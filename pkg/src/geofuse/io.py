"""Artifact formats: GFUS binary arrays, JSON manifests, CSV tables and PGM images.

GFUS layout (all little-endian)::

    b"GFUS" | u32 version | u8 dtype | u8 ndim | u64 dims[ndim] | payload (row-major)

dtype 0 is float64 and 1 is int64.  PGM images are binary (P5), 8-bit,
top row = highest z; valid values map linearly onto gray levels 1..255 and
masked cells are written as 0.
"""
from __future__ import annotations

import csv
import io as _io
import json
import os
import struct
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .exceptions import ArtifactError

MAGIC = b"GFUS"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {"f": 0, "i": 1, "u": 1, "b": 1}


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def encode_array(a) -> bytes:
    a = np.asarray(a)
    code = _CODES.get(a.dtype.kind)
    if code is None:
        raise ArtifactError(f"unsupported dtype {a.dtype}")
    if a.ndim > 255:
        raise ArtifactError("too many dimensions")
    data = np.ascontiguousarray(a, dtype=_DTYPES[code])
    head = MAGIC + struct.pack("<IBB", FORMAT_VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + data.tobytes()


def decode_array(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise ArtifactError(f"{source}: not a GFUS array (bad magic)")
    version, code, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{source}: unsupported format version {version}")
    if code not in _DTYPES:
        raise ArtifactError(f"{source}: unknown dtype code {code}")
    off = 10 + 8 * ndim
    if len(buf) < off:
        raise ArtifactError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 10)
    dt = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) != off + n * dt.itemsize:
        raise ArtifactError(f"{source}: payload is {len(buf) - off} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims).copy()


def write_array(path, a) -> int:
    data = encode_array(a)
    _atomic_write(Path(path), data)
    return len(data)


def read_array(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    return decode_array(buf, str(path))


def array_nbytes(shape, dtype_code: int = 0) -> int:
    return 10 + 8 * len(shape) + int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype_code].itemsize


# -- manifest -----------------------------------------------------------------------
class Manifest:
    """Descriptor of the arrays in one directory plus provenance.

    Saved as ``manifest.json``; :meth:`load` checks the version and that
    every array file exists with exactly the declared length.
    """

    FILE = "manifest.json"

    def __init__(self, root, config=None, seeds=None):
        self.root = Path(root)
        self.arrays: dict = {}
        self.config = config or {}
        self.seeds = dict(seeds or {})
        self.stages: dict = {}
        self.extra: dict = {}

    def add_array(self, name: str, a, file: str | None = None) -> Path:
        a = np.asarray(a)
        file = file or f"{name}.gfus"
        nbytes = write_array(self.root / file, a)
        self.arrays[name] = {"dtype": "float64" if _CODES[a.dtype.kind] == 0 else "int64",
                             "dims": [int(d) for d in a.shape], "file": file, "bytes": nbytes}
        return self.root / file

    def array(self, name: str) -> np.ndarray:
        if name not in self.arrays:
            raise ArtifactError(f"{self.root / self.FILE}: no array named {name!r}")
        a = read_array(self.root / self.arrays[name]["file"])
        if list(a.shape) != self.arrays[name]["dims"]:
            raise ArtifactError(f"{name}: dims {a.shape} disagree with the manifest")
        return a

    def mark_stage(self, stage: str, command: str, started: str | None = None):
        entry = {"command": command, "time": datetime.now(timezone.utc).isoformat()}
        if started:
            entry["started"] = started
        self.stages[stage] = entry

    def to_dict(self) -> dict:
        return {"format_version": MANIFEST_VERSION, "arrays": self.arrays, "config": self.config,
                "seeds": self.seeds, "stages": self.stages, "extra": self.extra}

    def save(self):
        _atomic_write(self.root / self.FILE, json.dumps(self.to_dict(), indent=1, sort_keys=True).encode())

    def validate(self):
        for name, d in self.arrays.items():
            p = self.root / d["file"]
            if not p.is_file():
                raise ArtifactError(f"{p}: missing array {name!r}")
            if p.stat().st_size != d["bytes"]:
                raise ArtifactError(f"{p}: size {p.stat().st_size} != declared {d['bytes']}")
            code = 0 if d["dtype"] == "float64" else 1
            if array_nbytes(d["dims"], code) != d["bytes"]:
                raise ArtifactError(f"{p}: declared length disagrees with dtype and dims")

    @classmethod
    def load(cls, root) -> "Manifest":
        root = Path(root)
        p = root / cls.FILE
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ArtifactError(f"cannot read {p}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{p} is not valid JSON: {exc}") from exc
        if raw.get("format_version") != MANIFEST_VERSION:
            raise ArtifactError(f"{p}: unsupported manifest version {raw.get('format_version')!r}")
        m = cls(root, raw.get("config"), raw.get("seeds"))
        m.arrays = raw.get("arrays", {})
        m.stages = raw.get("stages", {})
        m.extra = raw.get("extra", {})
        m.validate()
        return m

    @classmethod
    def exists(cls, root) -> bool:
        return (Path(root) / cls.FILE).is_file()


# -- CSV -----------------------------------------------------------------------------------
def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_bytes(header, rows) -> bytes:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue().encode("utf-8")


def write_csv(path, header, rows):
    _atomic_write(Path(path), csv_bytes(header, rows))


def read_csv(path) -> tuple[list, list]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ArtifactError(f"{path}: empty CSV")
    return rows[0], rows[1:]


# -- PGM -------------------------------------------------------------------------------------
def to_gray(field, vmin=None, vmax=None, mask=None) -> np.ndarray:
    """Map a (nz, nx) field to 8-bit gray, z flipped so the surface is on top."""
    f = np.asarray(field, dtype=float)
    valid = np.isfinite(f) if mask is None else (np.asarray(mask, bool) & np.isfinite(f))
    vals = f[valid]
    lo = float(vals.min()) if vmin is None and vals.size else (0.0 if vmin is None else float(vmin))
    hi = float(vals.max()) if vmax is None and vals.size else (1.0 if vmax is None else float(vmax))
    span = hi - lo if hi > lo else 1.0
    g = np.zeros(f.shape, dtype=np.uint8)
    scaled = np.clip((np.where(valid, f, lo) - lo) / span, 0.0, 1.0)
    g[valid] = (1 + np.rint(scaled[valid] * 254)).astype(np.uint8)
    return g[::-1]


def write_pgm(path, field, vmin=None, vmax=None, mask=None):
    g = to_gray(field, vmin, vmax, mask)
    head = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
    _atomic_write(Path(path), head + g.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ArtifactError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255 or len(parts[3]) != w * h:
        raise ArtifactError(f"{path}: unexpected PGM payload")
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
