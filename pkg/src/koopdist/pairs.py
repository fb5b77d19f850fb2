"""Noise->data pair sets and the two binary containers (pairs, checkpoints).

Pair container ("KDMP", version 1), all little-endian:

    magic  b"KDMP"          4 bytes
    version                 u8   (= 1)
    flags                   u8   (bit 0: records carry a label)
    count                   u32
    records                 count x [xT.x, xT.y, x0.x, x0.y] f32 (+ u16 label)
    trailer length          u32
    trailer                 UTF-8 "key=value" lines

Coordinates are narrowed from float64 to float32 on save; a second save of a
loaded set is bit-identical. Label 0xFFFF marks a sample outside every cell.

Checkpoint container ("KDMC", version 1): u32 array count, then per array
a u16-length-prefixed UTF-8 name, u8 ndim, ndim x u32 dims and the values as
float64; the same metadata trailer closes the file.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    NonFinitePayloadError,
    TruncatedFileError,
    VersionMismatchError,
)
from .ndmath import make_rng

PAIRS_MAGIC = b"KDMP"
CKPT_MAGIC = b"KDMC"
VERSION = 1
OUTSIDE_CODE = 0xFFFF

_REC = np.dtype([("xy", "<f4", (4,))])
_REC_LABELED = np.dtype([("xy", "<f4", (4,)), ("label", "<u2")])


class NoisePair(NamedTuple):
    x_T: np.ndarray
    x_0: np.ndarray
    label: int | None
    outside: bool


@dataclass
class PairMeta:
    teacher_kind: str = "edm"
    nfe: int = 10
    seed: int = 0
    grid: int = 4
    extent: float = 4.0
    conditional: bool = False
    prior_std: float = 1.0

    def __post_init__(self):
        if self.nfe < 1:
            raise ConfigError("meta.nfe must be >= 1")

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "PairMeta":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.type in ("bool", bool):
                kw[f.name] = raw == "True"
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            elif f.type in ("float", float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


@dataclass
class PairSet:
    """Column-stored pairs: ``x_T``, ``x_0`` of shape (n, 2) and optional labels.

    ``labels`` is None for an unconditional set; otherwise an int array with
    -1 for samples that landed outside every occupied cell.
    """

    x_T: np.ndarray
    x_0: np.ndarray
    labels: np.ndarray | None
    meta: PairMeta

    def __post_init__(self):
        self.x_T = np.asarray(self.x_T, dtype=np.float64).reshape(-1, 2)
        self.x_0 = np.asarray(self.x_0, dtype=np.float64).reshape(-1, 2)
        if len(self.x_T) != len(self.x_0):
            raise ConfigError("x_T and x_0 differ in length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.x_T),):
                raise ConfigError("labels must have one entry per pair")
        if (self.labels is not None) != self.meta.conditional:
            raise ConfigError("labels must be present exactly when meta.conditional")

    def __len__(self) -> int:
        return len(self.x_T)

    def __getitem__(self, i: int) -> NoisePair:
        label = None if self.labels is None else int(self.labels[i])
        return NoisePair(self.x_T[i], self.x_0[i], label, bool(self.outside[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def outside(self) -> np.ndarray:
        if self.labels is not None:
            return self.labels < 0
        from .teacher import CheckerboardSpec, cell_of

        return cell_of(CheckerboardSpec(self.meta.grid, self.meta.extent), self.x_0) < 0

    def subset(self, idx) -> "PairSet":
        labels = None if self.labels is None else self.labels[idx]
        return PairSet(self.x_T[idx], self.x_0[idx], labels, self.meta)

    def __eq__(self, other):
        if not isinstance(other, PairSet):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.meta == other.meta and same_labels
                and np.array_equal(self.x_T, other.x_T) and np.array_equal(self.x_0, other.x_0))


def _trailer(meta: dict[str, str]) -> bytes:
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise FormatError(f"metadata entry {k!r} cannot be encoded")
    body = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    return struct.pack("<I", len(body)) + body


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def header(self, magic: bytes):
        got = self.buf[:4]
        if len(self.buf) < 4:
            raise TruncatedFileError("file shorter than its magic")
        if got != magic:
            raise BadMagicError(f"expected magic {magic!r}, found {got!r}")
        self.pos = 4
        (version,) = self.unpack("<B")
        if version != VERSION:
            raise VersionMismatchError(f"container version {version}, this reader handles {VERSION}")

    def trailer(self) -> dict[str, str]:
        (n,) = self.unpack("<I")
        text = self.take(n).decode("utf-8")
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes after metadata")
        meta = {}
        for line in text.splitlines():
            k, sep, v = line.partition("=")
            if not sep:
                raise FormatError(f"bad metadata line {line!r}")
            meta[k] = v
        return meta


def pairs_to_bytes(ps: PairSet) -> bytes:
    n = len(ps)
    labeled = ps.labels is not None
    xy = np.concatenate([ps.x_T, ps.x_0], axis=1).astype("<f4")
    if not np.all(np.isfinite(xy)):
        raise NonFinitePayloadError("pair coordinates must be finite (after float32 narrowing)")
    rec = np.zeros(n, dtype=_REC_LABELED if labeled else _REC)
    rec["xy"] = xy
    if labeled:
        rec["label"] = np.where(ps.labels < 0, OUTSIDE_CODE, ps.labels)
    head = PAIRS_MAGIC + struct.pack("<BBI", VERSION, int(labeled), n)
    return head + rec.tobytes() + _trailer(ps.meta.to_dict())


def pairs_from_bytes(buf: bytes) -> PairSet:
    r = _Reader(buf)
    r.header(PAIRS_MAGIC)
    flags, n = r.unpack("<BI")
    labeled = bool(flags & 1)
    dt = _REC_LABELED if labeled else _REC
    rec = np.frombuffer(r.take(n * dt.itemsize), dtype=dt)
    meta = PairMeta.from_dict(r.trailer())
    xy = rec["xy"].astype(np.float64)
    if not np.all(np.isfinite(xy)):
        raise NonFinitePayloadError("file contains non-finite coordinates")
    labels = None
    if labeled:
        raw = rec["label"].astype(np.int64)
        labels = np.where(raw == OUTSIDE_CODE, -1, raw)
    if labeled != meta.conditional:
        raise FormatError("label flag disagrees with metadata 'conditional'")
    return PairSet(xy[:, :2], xy[:, 2:], labels, meta)


def save_pairs(ps: PairSet, path) -> None:
    Path(path).write_bytes(pairs_to_bytes(ps))


def load_pairs(path) -> PairSet:
    return pairs_from_bytes(Path(path).read_bytes())


def checkpoint_to_bytes(arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<BI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise NonFinitePayloadError(f"array {name!r} has non-finite values")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    out.append(_trailer(meta or {}))
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes):
    r = _Reader(buf)
    r.header(CKPT_MAGIC)
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFinitePayloadError(f"array {name!r} has non-finite values")
        arrays[name] = arr
    return arrays, r.trailer()


def save_checkpoint(path, arrays, meta=None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(arrays, meta))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


def split(ps: PairSet, train_fraction: float, seed: int = 0) -> tuple[PairSet, PairSet]:
    """Seeded shuffle split into (train, val)."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    perm = make_rng(seed).permutation(len(ps))
    k = int(round(train_fraction * len(ps)))
    return ps.subset(np.sort(perm[:k])), ps.subset(np.sort(perm[k:]))


def export_csv(ps: PairSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["xT_x", "xT_y", "x0_x", "x0_y", "label"])
        for i in range(len(ps)):
            label = "" if ps.labels is None else int(ps.labels[i])
            w.writerow([repr(float(v)) for v in (*ps.x_T[i], *ps.x_0[i])] + [label])
