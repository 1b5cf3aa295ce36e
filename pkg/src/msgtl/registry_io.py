"""Versioned binary container for a ModelRegistry.

Layout (all integers little-endian; see docs/registry_format.md):

    b"MSGT" | u32 version | u32 stage_count | u32 start | u32 crc
    per stage:
        7 x u32 (stage, n_raw, gamma, omega, depth, config_len, meta_len) | u32 crc
        depth x u32 widths | u32 crc
        config text | u32 crc
        meta text   | u32 crc
        per layer: 2 x u32 region | u32 crc, then W, W_snap, b, b_snap as
        f8 row-major, then pf_W, pf_b, pb_W, pb_b bit-packed (LSB first),
        each array followed by its u32 crc
    b"END\\0"
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .engine import LayerParams, StageNetwork, TrainConfig
from .pipeline import ModelRegistry
from .topology import Topology
from .transfer import TransferReport

MAGIC = b"MSGT"
TRAILER = b"END\0"
FORMAT_VERSION = 1
_MAX_WIDTH = 1 << 24
_MAX_DEPTH = 64


class RegistryFormatError(ValueError):
    pass


class RegistryVersionError(RegistryFormatError):
    pass


class RegistryChecksumError(RegistryFormatError):
    pass


class RegistryTruncatedError(RegistryFormatError):
    pass


def _crc(data: bytes) -> bytes:
    return struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def raw(self, data: bytes) -> None:
        self.parts.append(data)

    def block(self, data: bytes) -> None:
        self.parts.append(data)
        self.parts.append(_crc(data))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise RegistryTruncatedError(
                f"file ends at byte {len(self.data)} while reading {what} "
                f"({n} bytes needed at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def block(self, n: int, what: str) -> bytes:
        start = self.pos
        data = self.take(n, what)
        crc = self.take(4, f"checksum of {what}")
        if crc != _crc(data):
            raise RegistryChecksumError(f"checksum mismatch in {what} (offset {start})")
        return data


def _meta_text(net: StageNetwork, report) -> str:
    text = f"hidden = {net.hidden}\noutput = {net.output}\n"
    if report is not None:
        text += report.to_text()
    return text


def _parse_meta(text: str):
    kv = dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)
    report = TransferReport.from_text(text) if "transferred" in kv else None
    return kv["hidden"], kv["output"], report


def dumps(registry: ModelRegistry) -> bytes:
    w = _Writer()
    stages = registry.stages()
    w.raw(MAGIC)
    w.raw(struct.pack("<I", FORMAT_VERSION))
    w.block(struct.pack("<II", len(stages), registry.start))
    for q in stages:
        net = registry.networks[q]
        topo = net.topology
        cfg = registry.configs[q].to_text().encode("utf-8")
        name = registry.stage_names.get(q, "")
        meta = (f"name = {name}\n" + _meta_text(net, registry.reports.get(q))).encode("utf-8")
        w.block(struct.pack("<7I", q, registry.n_raw[q], topo.gamma, topo.omega, topo.depth,
                            len(cfg), len(meta)))
        w.block(struct.pack(f"<{topo.depth}I", *topo.widths))
        w.block(cfg)
        w.block(meta)
        for layer in net.layers:
            w.block(struct.pack("<2I", *layer.region))
            for arr in (layer.W, layer.W_snap, layer.b, layer.b_snap):
                w.block(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            for mask in (layer.pf_W, layer.pf_b, layer.pb_W, layer.pb_b):
                w.block(np.packbits(mask.reshape(-1), bitorder="little").tobytes())
    w.raw(TRAILER)
    return w.getvalue()


def _floats(r: _Reader, shape: Tuple[int, ...], what: str) -> np.ndarray:
    n = int(np.prod(shape))
    return np.frombuffer(r.block(8 * n, what), dtype="<f8").astype(np.float64).reshape(shape)


def _bits(r: _Reader, shape: Tuple[int, ...], what: str) -> np.ndarray:
    n = int(np.prod(shape))
    packed = np.frombuffer(r.block((n + 7) // 8, what), dtype=np.uint8)
    return np.unpackbits(packed, count=n, bitorder="little").astype(np.uint8).reshape(shape)


def loads(data: bytes) -> ModelRegistry:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise RegistryFormatError("not a registry file (bad magic)")
    (version,) = struct.unpack("<I", r.take(4, "format version"))
    if version != FORMAT_VERSION:
        raise RegistryVersionError(
            f"registry format version {version} is not supported (this build reads {FORMAT_VERSION})")
    n_stages, start = struct.unpack("<II", r.block(8, "file header"))
    reg = ModelRegistry({}, {}, {}, {}, start=start)
    for k in range(n_stages):
        q, n_raw, gamma, omega, depth, cfg_len, meta_len = struct.unpack(
            "<7I", r.block(28, f"stage {k} header"))
        if not 3 <= depth <= _MAX_DEPTH:
            raise RegistryFormatError(f"stage {q}: implausible depth {depth}")
        widths = struct.unpack(f"<{depth}I", r.block(4 * depth, f"stage {q} widths"))
        if not all(0 < x <= _MAX_WIDTH for x in widths):
            raise RegistryFormatError(f"stage {q}: implausible widths {widths}")
        cfg = TrainConfig.from_text(r.block(cfg_len, f"stage {q} config").decode("utf-8"))
        meta = r.block(meta_len, f"stage {q} metadata").decode("utf-8")
        name = meta.split("\n", 1)[0].partition(" = ")[2]
        hidden, output, report = _parse_meta(meta)
        topo = Topology(tuple(widths), gamma, omega)
        layers = []
        for l in range(topo.n_matrices):
            a, b = widths[l], widths[l + 1]
            what = f"stage {q} layer {l}"
            region = struct.unpack("<2I", r.block(8, f"{what} region"))
            W = _floats(r, (a, b), f"{what} weights")
            W_snap = _floats(r, (a, b), f"{what} snapshot weights")
            bias = _floats(r, (b,), f"{what} bias")
            b_snap = _floats(r, (b,), f"{what} snapshot bias")
            pf_W = _bits(r, (a, b), f"{what} forward mask")
            pf_b = _bits(r, (b,), f"{what} forward bias mask")
            pb_W = _bits(r, (a, b), f"{what} backward mask")
            pb_b = _bits(r, (b,), f"{what} backward bias mask")
            layers.append(LayerParams(W, bias, W_snap, b_snap, pf_W, pf_b, pb_W, pb_b,
                                      tuple(region)))
        reg.networks[q] = StageNetwork(topo, layers, hidden, output)
        reg.configs[q] = cfg
        reg.reports[q] = report
        reg.n_raw[q] = n_raw
        reg.stage_names[q] = name
    if r.take(4, "trailer") != TRAILER:
        raise RegistryFormatError("missing end marker")
    if r.pos != len(data):
        raise RegistryFormatError(f"{len(data) - r.pos} unexpected bytes after end marker")
    return reg


def save_registry(registry: ModelRegistry, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(registry))
    return path


def load_registry(path) -> ModelRegistry:
    return loads(Path(path).read_bytes())


def registries_equal(a: ModelRegistry, b: ModelRegistry) -> bool:
    """Field-by-field comparison with exact float equality."""
    if a.start != b.start or a.stages() != b.stages():
        return False
    for q in a.stages():
        if a.configs[q] != b.configs[q] or a.n_raw[q] != b.n_raw[q]:
            return False
        if a.reports.get(q) != b.reports.get(q):
            return False
        na, nb = a.networks[q], b.networks[q]
        if na.topology != nb.topology or (na.hidden, na.output) != (nb.hidden, nb.output):
            return False
        for la, lb in zip(na.layers, nb.layers):
            if tuple(la.region) != tuple(lb.region):
                return False
            for name in ("W", "b", "W_snap", "b_snap", "pf_W", "pf_b", "pb_W", "pb_b"):
                if not np.array_equal(getattr(la, name), getattr(lb, name)):
                    return False
    return True
