"""Versioned binary container for a trained detector.

Layout (all integers little-endian)::

    magic    8 bytes   b"WDNLEAK\\x00"
    version  uint32
    hlen     uint32    length of the JSON header that follows
    header   hlen bytes, UTF-8 JSON: shapes, dtypes and scalar parameters
    sections repeated: tag (4 ASCII bytes), size (uint64), payload

Sections are ``NORM`` (per-node mean and std, float64), ``AE  `` (every conv
weight and bias in layer order, float32) and ``OCSV`` (support vectors float32,
alpha float64, support indices int64). The file is a pure function of the
model, so equal models give byte-identical files and hashes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .autoencoder import Autoencoder
from .detector import LeakDetector
from .ocsvm import OcSvmModel
from .windowing import NormStats

MAGIC = b"WDNLEAK\x00"
VERSION = 1


class ModelFileError(ValueError):
    pass


def _section(tag: bytes, arrays: list[np.ndarray]) -> bytes:
    payload = b"".join(a.tobytes(order="C") for a in arrays)
    return tag + struct.pack("<Q", len(payload)) + payload


def dumps(detector: LeakDetector, extra: dict | None = None) -> bytes:
    ae, svm, stats = detector.autoencoder, detector.svm, detector.stats
    layers = ae.conv_layers()
    header = {
        "n_nodes": ae.n_nodes,
        "window_length": ae.window_length,
        "layers": [
            {"kind": type(l).__name__, "weight": list(l.params.weight.shape),
             "stride": l.params.stride, "padding": l.params.padding}
            for l in layers
        ],
        "normalized": stats is not None,
        "svm": {"n_support": int(svm.alpha.size), "dim": svm.dim, "rho": svm.rho,
                "gamma": svm.gamma, "nu": svm.nu, "n_train": svm.n_train},
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<II", VERSION, len(head)) + head)
    if stats is not None:
        out.write(_section(b"NORM", [stats.mean.astype("<f8"), stats.std.astype("<f8")]))
    ae_arrays = []
    for l in layers:
        ae_arrays += [l.params.weight.astype("<f4"), l.params.bias.astype("<f4")]
    out.write(_section(b"AE  ", ae_arrays))
    out.write(_section(b"OCSV", [
        svm.support_vectors.astype("<f4"),
        svm.alpha.astype("<f8"),
        np.asarray(svm.support_indices).astype("<i8"),
    ]))
    return out.getvalue()


def save(detector: LeakDetector, path: str | Path, extra: dict | None = None) -> str:
    """Write the model file; returns its sha256 hex digest."""
    blob = dumps(detector, extra)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def _read_sections(buf: memoryview, offset: int) -> dict[bytes, memoryview]:
    sections = {}
    while offset < len(buf):
        if offset + 12 > len(buf):
            raise ModelFileError("truncated section header")
        tag = bytes(buf[offset : offset + 4])
        (size,) = struct.unpack("<Q", buf[offset + 4 : offset + 12])
        start = offset + 12
        if start + size > len(buf):
            raise ModelFileError(f"section {tag!r} is truncated")
        sections[tag] = buf[start : start + size]
        offset = start + size
    return sections


class _Reader:
    def __init__(self, data: memoryview) -> None:
        self.data = data
        self.pos = 0

    def take(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if self.pos + n > len(self.data):
            raise ModelFileError("section shorter than its declared arrays")
        a = np.frombuffer(self.data[self.pos : self.pos + n], dtype=dtype).reshape(shape)
        self.pos += n
        return a.astype(np.dtype(dtype).newbyteorder("="))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ModelFileError("section longer than its declared arrays")


def loads(blob: bytes) -> tuple[LeakDetector, dict]:
    """Parse a model file; returns the detector and the stored header."""
    if blob[:8] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version} (expected {VERSION})")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"corrupt header: {exc}") from exc
    sections = _read_sections(memoryview(blob), 16 + hlen)
    k, length = header["n_nodes"], header["window_length"]

    stats = None
    if header["normalized"]:
        if b"NORM" not in sections:
            raise ModelFileError("missing NORM section")
        r = _Reader(sections[b"NORM"])
        stats = NormStats(r.take("<f8", (k,)), r.take("<f8", (k,)))
        r.done()

    ae = Autoencoder(k, length)
    layers = ae.conv_layers()
    if len(layers) != len(header["layers"]):
        raise ModelFileError("layer count does not match this architecture")
    if b"AE  " not in sections:
        raise ModelFileError("missing AE section")
    r = _Reader(sections[b"AE  "])
    for layer, spec in zip(layers, header["layers"]):
        if list(layer.params.weight.shape) != spec["weight"]:
            raise ModelFileError(f"layer shape {spec['weight']} does not match the architecture")
        layer.params.weight[...] = r.take("<f4", layer.params.weight.shape)
        layer.params.bias[...] = r.take("<f4", layer.params.bias.shape)
    r.done()

    if b"OCSV" not in sections:
        raise ModelFileError("missing OCSV section")
    s = header["svm"]
    r = _Reader(sections[b"OCSV"])
    svm = OcSvmModel(
        support_vectors=r.take("<f4", (s["n_support"], s["dim"])),
        alpha=r.take("<f8", (s["n_support"],)),
        rho=float(s["rho"]),
        gamma=float(s["gamma"]),
        nu=float(s["nu"]),
        n_train=int(s["n_train"]),
        support_indices=r.take("<i8", (s["n_support"],)),
    )
    r.done()
    if svm.dim != ae.embedding_dim:
        raise ModelFileError(f"SVM dimension {svm.dim} does not match the embedding ({ae.embedding_dim})")
    return LeakDetector(ae, svm, stats), header


def load(path: str | Path, n_nodes: int | None = None) -> tuple[LeakDetector, dict]:
    """Load a model file, optionally checking it was trained for ``n_nodes`` nodes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    detector, header = loads(path.read_bytes())
    if n_nodes is not None and detector.n_nodes != n_nodes:
        raise ModelFileError(f"model expects {detector.n_nodes} nodes, data has {n_nodes}")
    return detector, header


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
