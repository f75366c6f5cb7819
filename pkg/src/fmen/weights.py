"""Binary weight files.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"FMEN"
    4       4     u32 format version (1)
    8       4     u32 header length H in bytes
    12      H     UTF-8 JSON header
    12+H    4*N   float32 payload, arrays concatenated in header order, C order
    end-4   4     u32 CRC-32 of every preceding byte

The header holds ``config`` (builder config echo, may be null), ``graph``
(the topology document from :meth:`Graph.to_json`) and ``layers``: one
record ``{"name", "kind", "shape"}`` per stored array, named
``"<node>/<field>"``. BN records also carry ``eps``.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import WeightFileError
from .graph import Graph
from .tensor import BnParams, ConvWeights

MAGIC = b"FMEN"
VERSION = 1


def _records(g: Graph):
    for n in g.nodes:
        p = g.params.get(n.id)
        if p is None:
            if n.kind in ("conv", "bn"):
                raise WeightFileError(f"node {n.id!r} has no parameters to write")
            continue
        for name, arr in p.arrays().items():
            rec = {"name": f"{n.id}/{name}", "kind": n.kind, "shape": list(arr.shape)}
            if isinstance(p, BnParams):
                rec["eps"] = p.eps
            yield rec, arr


def write_weights(path, g: Graph) -> int:
    """Serialise ``g``'s parameters; returns the file size in bytes."""
    layers, blobs = [], []
    for rec, arr in _records(g):
        layers.append(rec)
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps({
        "config": g.meta.get("config"),
        "form": g.meta.get("form"),
        "graph": g.to_json(),
        "layers": layers,
    }).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)
    data = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(data)
    return len(data)


def read_header(path) -> dict:
    return _parse(Path(path).read_bytes())[0]


def _parse(data: bytes):
    if len(data) < 16 or data[:4] != MAGIC:
        raise WeightFileError("bad magic: not an FMEN weight file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise WeightFileError("CRC mismatch: weight file is corrupt")
    try:
        header = json.loads(data[12:12 + hlen])
    except ValueError as err:
        raise WeightFileError(f"unreadable header: {err}") from None
    payload = data[12 + hlen:-4]
    expected = sum(int(np.prod(r["shape"])) for r in header["layers"]) * 4
    if len(payload) != expected:
        raise WeightFileError(f"payload is {len(payload)} bytes, header describes {expected}")
    return header, payload


def read_weights(path, g: Graph | None = None) -> Graph:
    """Load parameters into a copy of ``g`` (or into the graph stored in the file)."""
    header, payload = _parse(Path(path).read_bytes())
    if g is None:
        g = Graph.from_json(header["graph"])
    else:
        g = g.copy()
    g = g.astype(np.float32)
    if header.get("config") is not None:
        g.meta.setdefault("config", header["config"])
    if header.get("form") is not None:
        g.meta.setdefault("form", header["form"])
    arrays: dict[str, dict[str, np.ndarray]] = {}
    eps: dict[str, float] = {}
    off = 0
    for rec in header["layers"]:
        n = int(np.prod(rec["shape"]))
        arr = np.frombuffer(payload, "<f4", n, off).reshape(rec["shape"]).astype(np.float32)
        off += 4 * n
        node_id, field = rec["name"].rsplit("/", 1)
        arrays.setdefault(node_id, {})[field] = arr
        if "eps" in rec:
            eps[node_id] = rec["eps"]
    for n in g.nodes:
        if n.kind not in ("conv", "bn"):
            continue
        a = arrays.pop(n.id, None)
        if a is None:
            raise WeightFileError(f"file has no parameters for node {n.id!r}")
        try:
            if n.kind == "conv":
                p = ConvWeights(a["kernel"], a["bias"])
                if (p.out_ch, p.in_ch, p.k) != (n.attrs["out_ch"], n.attrs["in_ch"], n.attrs["k"]):
                    raise WeightFileError(f"{n.id}: kernel shape {p.kernel.shape} disagrees with the graph")
            else:
                p = BnParams(a["gamma"], a["beta"], a["running_mean"], a["running_var"], eps.get(n.id, 1e-5))
                if p.channels != g.shapes[n.inputs[0]][1]:
                    raise WeightFileError(f"{n.id}: BN width {p.channels} disagrees with the graph")
        except KeyError as err:
            raise WeightFileError(f"{n.id}: missing array {err}") from None
        g.params[n.id] = p
    if arrays:
        raise WeightFileError(f"file has parameters for unknown nodes: {sorted(arrays)}")
    return g
