"""Binary checkpoints: model parameters, running stats, and optimizer state.

Layout (little-endian throughout):

    magic   4 bytes  "DGRD"
    version u32      currently 1
    entries          repeated until 4 bytes before EOF:
        name_len u32, name UTF-8, rank u32, dims rank*u64, data f64...
    crc32   u32      of everything between the version field and the CRC

Entry names carry the section: "cfg.*" holds the model configuration as
rank-0 scalars so a checkpoint is self-describing, "model.*" the parameter
and running-statistic tensors, "opt.*" the Adam moments and step counter.
Optimizer entries are optional (an eval-only checkpoint omits them).
Round trips are byte-exact: float64 payloads are written bitwise and the
entry order is fixed, so saving a loaded checkpoint reproduces the file.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .errors import FormatError
from .model import ModelConfig, SegModel, build_model
from .tensor_core import Rng

MAGIC = b"DGRD"
VERSION = 1

_CFG_FIELDS = ("in_channels", "num_labels", "depth", "base_channels", "patch_size")


def _pack_entry(name: str, arr) -> bytes:
    # np.asarray keeps python floats rank 0; tobytes() serializes row-major
    arr = np.asarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    parts = [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
    if arr.ndim:
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def fail(self, why: str):
        raise FormatError(f"{self.path}: {why} at offset {self.pos}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated (needed {n} bytes)")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def entry(self):
        name_len = self.u32()
        if name_len > 4096:
            self.fail(f"implausible name length {name_len}")
        try:
            name = self.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            self.fail("entry name is not valid UTF-8")
        rank = self.u32()
        if rank > 8:
            self.fail(f"implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", self.take(8 * rank)) if rank else ()
        count = 1
        for d in dims:
            if d == 0 or count * d > (1 << 33):
                self.fail(f"implausible dims {dims} for entry {name!r}")
            count *= d
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(dims)
        return name, data.copy()


def save_checkpoint(m: SegModel, state, path) -> None:
    """Write model (+ optional Adam `state` with .step/.m/.v) atomically."""
    parts = []
    for f in _CFG_FIELDS:
        parts.append(_pack_entry(f"cfg.{f}", float(getattr(m.cfg, f))))
    for name, arr in m.state_table().items():
        parts.append(_pack_entry(f"model.{name}", arr))
    if state is not None:
        parts.append(_pack_entry("opt.step", float(state.step)))
        for name in m.param_table():
            parts.append(_pack_entry(f"opt.m.{name}", state.m[name]))
            parts.append(_pack_entry(f"opt.v.{name}", state.v[name]))
    body = b"".join(parts)
    blob = MAGIC + struct.pack("<I", VERSION) + body + struct.pack("<I", zlib.crc32(body))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint back into a fresh (SegModel, AdamState | None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        r.pos = 0
        r.fail("bad magic")
    version = r.u32()
    if version != VERSION:
        r.fail(f"unsupported version {version}")
    if len(data) < r.pos + 4:
        r.fail("missing checksum")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[8:-4])
    if stored_crc != actual_crc:
        raise FormatError(f"{path}: checksum mismatch "
                          f"(stored {stored_crc:#010x}, computed {actual_crc:#010x})")

    entries: dict[str, np.ndarray] = {}
    while r.pos < len(data) - 4:
        name, arr = r.entry()
        if name in entries:
            r.fail(f"duplicate entry {name!r}")
        entries[name] = arr

    cfg_kwargs = {}
    for f in _CFG_FIELDS:
        key = f"cfg.{f}"
        if key not in entries:
            raise FormatError(f"{path}: missing config entry {key!r}")
        cfg_kwargs[f] = int(round(float(entries.pop(key))))
    cfg = ModelConfig(**cfg_kwargs)
    m = build_model(cfg, Rng(0))

    for name, arr in m.state_table().items():
        key = f"model.{name}"
        if key not in entries:
            raise FormatError(f"{path}: missing tensor {key!r}")
        stored = entries.pop(key)
        if stored.shape != arr.shape:
            raise FormatError(
                f"{path}: tensor {key!r} has shape {stored.shape}, expected {arr.shape}"
            )
        arr[...] = stored

    state = None
    opt_keys = [k for k in entries if k.startswith("opt.")]
    if opt_keys:
        from .training import AdamState  # deferred: training imports this module

        if "opt.step" not in entries:
            raise FormatError(f"{path}: optimizer entries present but opt.step missing")
        step = int(round(float(entries.pop("opt.step"))))
        m_mom, v_mom = {}, {}
        for name, arr in m.param_table().items():
            for prefix, dest in (("opt.m.", m_mom), ("opt.v.", v_mom)):
                key = f"{prefix}{name}"
                if key not in entries:
                    raise FormatError(f"{path}: missing optimizer tensor {key!r}")
                stored = entries.pop(key)
                if stored.shape != arr.shape:
                    raise FormatError(
                        f"{path}: tensor {key!r} has shape {stored.shape}, "
                        f"expected {arr.shape}"
                    )
                dest[name] = stored
        state = AdamState(step=step, m=m_mom, v=v_mom)

    if entries:
        raise FormatError(f"{path}: unrecognized entries {sorted(entries)[:3]}")
    return m, state
