"""BVOL volume container, CSV/JSON reporting and parameter checkpoints.

BVOL layout (all integers little-endian)::

    b"BVOL" | u8 version (=1) | u32 header length | header JSON (utf-8) | payload

The header holds ``dims`` ([d,h,w] or [c,d,h,w]), ``dtype`` ("f32", "f64"
or "u8"), ``name`` and ``spacing``. The payload is the raw row-major data
with the last axis fastest. Headers are written canonically (sorted keys,
compact separators) so reading and rewriting a file reproduces its bytes.
"""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, TruncatedPayload, UnknownDtype

MAGIC = b"BVOL"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}


@dataclass
class VolContainer:
    data: np.ndarray = field(repr=False)
    name: str = ""
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def dtype_code(self):
        return dtype_code(self.data.dtype)

    def header(self):
        return {"dims": [int(d) for d in self.data.shape], "dtype": self.dtype_code,
                "name": self.name, "spacing": [float(s) for s in self.spacing]}


def dtype_code(dtype):
    dtype = np.dtype(dtype)
    if dtype == np.bool_:
        return "u8"
    for code, dt in DTYPES.items():
        if dtype.kind == dt.kind and dtype.itemsize == dt.itemsize:
            return code
    raise UnknownDtype(f"no BVOL code for dtype {dtype}")


def encode_vol(vol):
    data = np.asarray(vol.data)
    if data.ndim not in (3, 4):
        raise ValueError(f"BVOL stores 3-D or 4-D arrays, got {data.shape}")
    code = dtype_code(data.dtype)
    header = json.dumps(vol.header(), sort_keys=True, separators=(",", ":")).encode()
    payload = np.ascontiguousarray(data.astype(DTYPES[code], copy=False)).tobytes()
    return MAGIC + struct.pack("<BI", VERSION, len(header)) + header + payload


def decode_vol(buf):
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise BadMagic("not a BVOL file")
    version, hlen = struct.unpack("<BI", buf[4:9])
    if version != VERSION:
        raise BadMagic(f"unsupported BVOL version {version}")
    if len(buf) < 9 + hlen:
        raise TruncatedPayload("header shorter than its declared length")
    try:
        header = json.loads(buf[9:9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadMagic(f"unreadable BVOL header: {exc}") from exc
    code = header.get("dtype")
    if code not in DTYPES:
        raise UnknownDtype(f"unknown dtype code {code!r}")
    dims = [int(d) for d in header["dims"]]
    expect = int(np.prod(dims)) * DTYPES[code].itemsize
    payload = buf[9 + hlen:]
    if len(payload) != expect:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header implies {expect}")
    data = np.frombuffer(payload, dtype=DTYPES[code]).reshape(dims).astype(
        DTYPES[code].newbyteorder("="), copy=True)
    return VolContainer(data, header.get("name", ""), tuple(header.get("spacing", (1, 1, 1))))


def write_vol(path, data, name="", spacing=(1.0, 1.0, 1.0)):
    """Write an array (or a :class:`VolContainer`) as BVOL."""
    vol = data if isinstance(data, VolContainer) else VolContainer(np.asarray(data), name, spacing)
    if vol.data.dtype == np.bool_:
        vol = VolContainer(vol.data.astype(np.uint8), vol.name, vol.spacing)
    Path(path).write_bytes(encode_vol(vol))
    return vol


def read_vol(path):
    return decode_vol(Path(path).read_bytes())


# -- json / csv ----------------------------------------------------------------
def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


class CsvLog:
    """Append rows with a fixed header; the header row is written once."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = list(columns)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.columns, extrasaction="ignore")
        self._writer.writeheader()
        self.rows = 0

    def append(self, row):
        self._writer.writerow({k: _fmt(row.get(k)) for k in self.columns})
        self.rows += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, rows, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with CsvLog(path, columns) as log:
        for r in rows:
            log.append(r)
    return len(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- checkpoints ----------------------------------------------------------------
def save_checkpoint(directory, params, extra=None):
    """One BVOL per parameter (flattened to [1,1,n]) plus a name -> shape manifest."""
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    manifest = {"params": [], "extra": extra or {}}
    for i, (name, p) in enumerate(params.items()):
        arr = np.asarray(p.data if hasattr(p, "data") else p)
        fname = f"{i:03d}.bvol"
        write_vol(d / "params" / fname, arr.reshape(1, 1, -1), name=name)
        manifest["params"].append({"name": name, "shape": list(arr.shape), "file": fname})
    write_json(d / "manifest.json", manifest)
    return d


def load_checkpoint(directory):
    """Returns ``(name -> array, extra)``."""
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    out = {}
    for entry in manifest["params"]:
        vol = read_vol(d / "params" / entry["file"])
        if vol.name != entry["name"]:
            raise BadMagic(f"checkpoint entry {entry['file']} is {vol.name!r}, "
                           f"expected {entry['name']!r}")
        out[entry["name"]] = vol.data.reshape(entry["shape"])
    return out, manifest.get("extra", {})


def tree_bytes(directory):
    """Relative path -> bytes for every file below ``directory`` (for identity checks)."""
    root = Path(directory)
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = Path(dirpath) / f
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


# -- datasets ---------------------------------------------------------------------
class StoredDataset:
    """Dataset read back from a ``gen`` directory; same interface as synth.Dataset."""

    def __init__(self, directory):
        from .synth import DatasetSplit, SynthConfig, SynthVolume
        self.root = Path(directory)
        try:
            self.manifest = read_json(self.root / "manifest.json")
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"no dataset manifest in {self.root}") from exc
        self.cfg = SynthConfig(**self.manifest["synth"])
        self.split = DatasetSplit(**self.manifest["split"])
        self.plan = [(v["seed"], v["kind"]) for v in self.manifest["volumes"]]
        self._vol = SynthVolume
        self._cache = {}

    def __len__(self):
        return len(self.plan)

    def __getitem__(self, i):
        if i not in self._cache:
            img = read_vol(self.root / "volumes" / f"vol_{i:03d}_image.bvol").data
            mask = read_vol(self.root / "volumes" / f"vol_{i:03d}_mask.bvol").data.astype(bool)
            seed, kind = self.plan[i]
            self._cache[i] = self._vol(img, mask, seed, kind)
        return self._cache[i]


def save_dataset(directory, data):
    d = Path(directory)
    (d / "volumes").mkdir(parents=True, exist_ok=True)
    for i in range(len(data)):
        vol = data[i]
        write_vol(d / "volumes" / f"vol_{i:03d}_image.bvol", vol.image, name=f"image_{i:03d}")
        write_vol(d / "volumes" / f"vol_{i:03d}_mask.bvol", vol.mask, name=f"mask_{i:03d}")
    write_json(d / "manifest.json", data.manifest())
    return d
