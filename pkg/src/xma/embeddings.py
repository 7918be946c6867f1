"""Embedding data model and its on-disk binary/CSV formats."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"XMA1"

_FLAG_TRUE_ID = 0x01
_FLAG_CAMERA = 0x02
_FLAG_NORMALIZED = 0x04

UNIT_NORM_TOL = 1e-6


class FormatError(ValueError):
    """An embedding file or construction argument violates the data contract."""


class Modality(IntEnum):
    VIS = 0
    IR = 1


_MODALITY_NAMES = {Modality.VIS: "VIS", Modality.IR: "IR"}
_MODALITY_FROM_NAME = {"VIS": Modality.VIS, "IR": Modality.IR}


def _freeze(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EmbeddingSet:
    """N rows of d-dim features with per-row modality and optional labels.

    Immutable after construction (arrays are marked read-only), so instances
    are safe to share across any number of concurrent readers.

    `parent_indices` is only set on views produced by `subset_view` and maps
    each row back to its row index in the parent set.
    """

    features: np.ndarray
    modality: np.ndarray
    true_id: np.ndarray | None = None
    camera: np.ndarray | None = None
    normalized: bool = False
    parent_indices: np.ndarray | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise FormatError(f"features must be 2-D, got shape {feats.shape}")
        n, d = feats.shape
        if n < 1:
            raise FormatError("empty set: N must be >= 1")
        if d < 2:
            raise FormatError(f"feature dim must be >= 2, got {d}")
        if not np.all(np.isfinite(feats)):
            bad = int(np.argwhere(~np.isfinite(feats))[0][0])
            raise FormatError(f"non-finite feature value in row {bad}")

        mod = np.ascontiguousarray(self.modality, dtype=np.uint8)
        if mod.shape != (n,):
            raise FormatError(f"modality length {mod.shape} does not match N={n}")
        if not np.all((mod == Modality.VIS) | (mod == Modality.IR)):
            raise FormatError("modality values must be 0 (VIS) or 1 (IR)")

        tid = self.true_id
        if tid is not None:
            tid = np.ascontiguousarray(tid, dtype=np.uint32)
            if tid.shape != (n,):
                raise FormatError("true_id length does not match N")
        cam = self.camera
        if cam is not None:
            cam = np.ascontiguousarray(cam, dtype=np.uint32)
            if cam.shape != (n,):
                raise FormatError("camera length does not match N")
        par = self.parent_indices
        if par is not None:
            par = np.ascontiguousarray(par, dtype=np.int64)

        if self.normalized:
            norms = np.linalg.norm(feats, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                bad = int(np.argmax(np.abs(norms - 1.0)))
                raise FormatError(
                    f"normalized flag set but row {bad} has norm {norms[bad]!r}"
                )

        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "modality", _freeze(mod))
        object.__setattr__(self, "true_id", _freeze(tid))
        object.__setattr__(self, "camera", _freeze(cam))
        object.__setattr__(self, "parent_indices", _freeze(par))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def modality_counts(self) -> tuple[int, int]:
        """(count of VIS rows, count of IR rows); sums to N."""
        n_vis = int(np.sum(self.modality == Modality.VIS))
        return n_vis, self.n - n_vis

    def modality_indices(self, tag: Modality) -> np.ndarray:
        return np.flatnonzero(self.modality == tag)


def l2_normalize(s: EmbeddingSet) -> EmbeddingSet:
    """Return a copy with unit-norm rows and the normalized flag set.

    Raises FormatError naming the row index if any row has zero norm.
    """
    norms = np.linalg.norm(s.features, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise FormatError(f"cannot normalize zero-norm row {int(zero[0])}")
    feats = s.features / norms[:, None]
    return EmbeddingSet(feats, s.modality, s.true_id, s.camera,
                        normalized=True, parent_indices=s.parent_indices)


def ensure_normalized(s: EmbeddingSet) -> EmbeddingSet:
    """Pass through normalized sets; otherwise normalize defensively with a warning."""
    if s.normalized:
        return s
    logger.warning("embedding set is not normalized; normalizing defensively")
    return l2_normalize(s)


def subset_view(s: EmbeddingSet, indices) -> EmbeddingSet:
    """Rows of `s` in the given order, with the parent index map retained.

    Indices must be in range and distinct.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise FormatError("indices must be a 1-D sequence")
    if idx.size == 0:
        raise FormatError("empty set: N must be >= 1")
    if np.any(idx < 0) or np.any(idx >= s.n):
        bad = idx[(idx < 0) | (idx >= s.n)][0]
        raise FormatError(f"index {int(bad)} out of range for N={s.n}")
    if np.unique(idx).size != idx.size:
        raise FormatError("duplicate index in subset selection")
    if s.parent_indices is not None:
        parent = s.parent_indices[idx]
    else:
        parent = idx
    return EmbeddingSet(
        s.features[idx],
        s.modality[idx],
        None if s.true_id is None else s.true_id[idx],
        None if s.camera is None else s.camera[idx],
        normalized=s.normalized,
        parent_indices=parent,
    )


def save(s: EmbeddingSet, path, fmt: str = "binary") -> None:
    """Write the set: binary round-trips bit-exactly, CSV within 1e-6 per element."""
    path = Path(path)
    if fmt == "binary":
        _save_binary(s, path)
    elif fmt == "csv":
        _save_csv(s, path)
    else:
        raise FormatError(f"unknown format {fmt!r}")


def load(path, fmt: str = "binary") -> EmbeddingSet:
    """Read a set written by `save`, validating the on-disk contract."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    if fmt == "binary":
        return _load_binary(path)
    if fmt == "csv":
        return _load_csv(path)
    raise FormatError(f"unknown format {fmt!r}")


def _save_binary(s: EmbeddingSet, path: Path) -> None:
    flags = 0
    if s.true_id is not None:
        flags |= _FLAG_TRUE_ID
    if s.camera is not None:
        flags |= _FLAG_CAMERA
    if s.normalized:
        flags |= _FLAG_NORMALIZED
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIB", s.n, s.dim, flags))
        f.write(s.features.astype("<f4").tobytes())
        f.write(s.modality.astype("u1").tobytes())
        if s.true_id is not None:
            f.write(s.true_id.astype("<u4").tobytes())
        if s.camera is not None:
            f.write(s.camera.astype("<u4").tobytes())


def _load_binary(path: Path) -> EmbeddingSet:
    raw = path.read_bytes()
    if len(raw) < 13 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an XMA1 embedding file")
    n, d, flags = struct.unpack("<IIB", raw[4:13])
    if n < 1 or d < 2:
        raise FormatError(f"{path}: invalid header N={n}, d={d}")
    off = 13
    need = n * d * 4 + n
    if flags & _FLAG_TRUE_ID:
        need += n * 4
    if flags & _FLAG_CAMERA:
        need += n * 4
    if len(raw) - off != need:
        raise FormatError(f"{path}: payload size {len(raw) - off}, expected {need}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += n * d * 4
    if not np.all(np.isfinite(feats)):
        raise FormatError(f"{path}: NaN/Inf feature value")
    mod = np.frombuffer(raw, dtype="u1", count=n, offset=off)
    off += n
    if not np.all(mod <= 1):
        raise FormatError(f"{path}: unknown modality tag {int(mod.max())}")
    tid = cam = None
    if flags & _FLAG_TRUE_ID:
        tid = np.frombuffer(raw, dtype="<u4", count=n, offset=off)
        off += n * 4
    if flags & _FLAG_CAMERA:
        cam = np.frombuffer(raw, dtype="<u4", count=n, offset=off)
    return EmbeddingSet(feats.astype(np.float64), mod.copy(), tid, cam,
                        normalized=bool(flags & _FLAG_NORMALIZED))


def _save_csv(s: EmbeddingSet, path: Path) -> None:
    header = [f"f{j}" for j in range(s.dim)] + ["modality"]
    if s.true_id is not None:
        header.append("id")
    if s.camera is not None:
        header.append("camera")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        feats32 = s.features.astype(np.float32)
        for i in range(s.n):
            row = [f"{v:.8e}" for v in feats32[i]]
            row.append(_MODALITY_NAMES[Modality(int(s.modality[i]))])
            if s.true_id is not None:
                row.append(str(int(s.true_id[i])))
            if s.camera is not None:
                row.append(str(int(s.camera[i])))
            w.writerow(row)


def _load_csv(path: Path) -> EmbeddingSet:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = rows[0]
    d = sum(1 for h in header if h.startswith("f") and h[1:].isdigit())
    if d < 2 or header[:d] != [f"f{j}" for j in range(d)]:
        raise FormatError(f"{path}: malformed header {header[:4]}...")
    rest = header[d:]
    if not rest or rest[0] != "modality":
        raise FormatError(f"{path}: header missing modality column")
    has_id = "id" in rest
    has_cam = "camera" in rest
    expect_cols = d + 1 + has_id + has_cam
    feats, mods, tids, cams = [], [], [], []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != expect_cols:
            raise FormatError(
                f"{path}: line {ln}: {len(row)} values, expected {expect_cols}"
            )
        try:
            vals = [float(v) for v in row[:d]]
        except ValueError as e:
            raise FormatError(f"{path}: line {ln}: {e}") from None
        if not all(np.isfinite(vals)):
            raise FormatError(f"{path}: line {ln}: NaN/Inf feature value")
        feats.append(vals)
        tag = row[d]
        if tag not in _MODALITY_FROM_NAME:
            raise FormatError(f"{path}: line {ln}: unknown modality tag {tag!r}")
        mods.append(int(_MODALITY_FROM_NAME[tag]))
        col = d + 1
        if has_id:
            tids.append(int(row[col]))
            col += 1
        if has_cam:
            cams.append(int(row[col]))
    if not feats:
        raise FormatError(f"{path}: empty set: N must be >= 1")
    feat_arr = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feat_arr, axis=1)
    normalized = bool(np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOL))
    return EmbeddingSet(
        feat_arr,
        np.asarray(mods, dtype=np.uint8),
        np.asarray(tids, dtype=np.uint32) if has_id else None,
        np.asarray(cams, dtype=np.uint32) if has_cam else None,
        normalized=normalized,
    )
