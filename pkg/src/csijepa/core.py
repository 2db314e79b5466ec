"""Domain types, per-window standardization, and the shared file formats.

Three on-disk formats live here and are frozen as contracts:

* Corpus: 8-byte magic ``CSIJEPA0``, then 7 header fields as little-endian
  u32 in declared order (version, num_samples, C, K, T, has_labels,
  num_classes), then ``num_samples`` records of
  ``(u16 label if has_labels)(C*K*T little-endian f32, C-major then K then T)``.
* Checkpoint: a raw little-endian f32 blob plus a sidecar text manifest with
  one ``name shape offset`` line per tensor (shape comma-joined, offset in
  bytes into the blob).
* Config: flat ``key=value`` text, ``#`` comments, read by the CLI.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "FileFormatError",
    "CsiWindow",
    "PatchConfig",
    "LabeledSample",
    "CorpusHeader",
    "Corpus",
    "standardize",
    "write_corpus",
    "read_corpus",
    "save_tensors",
    "load_tensors",
    "read_config_file",
]

CORPUS_MAGIC = b"CSIJEPA0"
CORPUS_VERSION = 1

# Below this population std a raw window is treated as constant and maps to
# all zeros instead of dividing by ~0.
DEGENERATE_STD = 1e-12

_F32 = np.dtype("<f4")
_U16 = np.dtype("<u2")


class FileFormatError(ValueError):
    """Malformed corpus, checkpoint, or config input."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CsiWindow:
    """One CSI amplitude window, shape (C, K, T), float32.

    ``degenerate`` marks a window that was constant before standardization
    (it standardizes to all zeros). Windows are immutable after construction.
    """

    values: np.ndarray
    degenerate: bool = False

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float32, order="C")
        if arr.ndim != 3:
            raise ValueError(f"window must be 3-D (C, K, T), got shape {arr.shape}")
        if 0 in arr.shape:
            raise ValueError(f"window dims must be positive, got {arr.shape}")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def subcarriers(self) -> int:
        return self.values.shape[1]

    @property
    def time_steps(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry for one window family plus the token embedding width.

    ``grid_k * grid_t >= 2`` so a mask can always leave at least one target
    and one context patch.
    """

    patch_k: int
    patch_t: int
    grid_k: int
    grid_t: int
    embed_dim: int

    def __post_init__(self) -> None:
        for name in ("patch_k", "patch_t", "grid_k", "grid_t", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.grid_k * self.grid_t < 2:
            raise ValueError("patch grid must contain at least 2 patches")

    @classmethod
    def from_dims(
        cls, subcarriers: int, time_steps: int, patch_k: int, patch_t: int, embed_dim: int
    ) -> "PatchConfig":
        if patch_k <= 0 or patch_t <= 0:
            raise ValueError("patch dims must be positive")
        if subcarriers % patch_k != 0:
            raise ValueError(f"K={subcarriers} not divisible by patch_k={patch_k}")
        if time_steps % patch_t != 0:
            raise ValueError(f"T={time_steps} not divisible by patch_t={patch_t}")
        return cls(patch_k, patch_t, subcarriers // patch_k, time_steps // patch_t, embed_dim)

    @property
    def subcarriers(self) -> int:
        return self.grid_k * self.patch_k

    @property
    def time_steps(self) -> int:
        return self.grid_t * self.patch_t

    @property
    def num_tokens(self) -> int:
        return self.grid_k * self.grid_t


@dataclass(frozen=True)
class LabeledSample:
    window: CsiWindow
    label: int
    task_id: int = 0

    def __post_init__(self) -> None:
        if self.label < 0:
            raise ValueError("label must be non-negative")


@dataclass(frozen=True)
class CorpusHeader:
    version: int
    num_samples: int
    channels: int
    subcarriers: int
    time_steps: int
    has_labels: bool
    num_classes: int

    def validate(self) -> None:
        if self.version != CORPUS_VERSION:
            raise FileFormatError(f"unsupported corpus version {self.version}")
        if self.has_labels and self.num_classes == 0:
            raise FileFormatError("labeled corpus must declare num_classes > 0")
        if not self.has_labels and self.num_classes != 0:
            raise FileFormatError("unlabeled corpus must declare num_classes = 0")
        if min(self.channels, self.subcarriers, self.time_steps) <= 0:
            raise FileFormatError("corpus dims must be positive")


@dataclass
class Corpus:
    """In-memory corpus: windows plus (for labeled corpora) parallel labels."""

    windows: list[CsiWindow]
    labels: Optional[list[int]] = None
    num_classes: int = 0

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self) -> Iterator[tuple[CsiWindow, Optional[int]]]:
        if self.labels is None:
            return iter((w, None) for w in self.windows)
        return iter(zip(self.windows, self.labels))

    @property
    def labels_array(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("corpus is unlabeled")
        return np.asarray(self.labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def standardize(window: CsiWindow) -> CsiWindow:
    """Zero-mean, unit-std (population convention) over all C*K*T entries.

    Moments accumulate in float64; output is float32. A constant window
    (std < 1e-12) maps to all zeros with ``degenerate=True`` so corpus
    generation never aborts mid-stream.
    """
    vals = window.values
    if not np.all(np.isfinite(vals)):
        raise ValueError("window contains non-finite values")
    v64 = vals.astype(np.float64)
    mean = v64.mean()
    std = v64.std()  # population: divide by C*K*T
    if std < DEGENERATE_STD:
        return CsiWindow(np.zeros_like(vals), degenerate=True)
    out = ((v64 - mean) / std).astype(np.float32)
    return CsiWindow(out)


# ---------------------------------------------------------------------------
# Corpus I/O
# ---------------------------------------------------------------------------

_HEADER_STRUCT = struct.Struct("<7I")


def write_corpus(
    path: str | Path,
    windows: Sequence[CsiWindow],
    labels: Optional[Sequence[int]] = None,
    num_classes: int = 0,
) -> None:
    """Write windows (and optional labels) in the corpus format.

    All windows must share one (C, K, T) shape; labels, when present, must
    lie in [0, num_classes).
    """
    if len(windows) == 0:
        raise ValueError("refusing to write an empty corpus")
    if labels is not None:
        if len(labels) != len(windows):
            raise ValueError("labels and windows length mismatch")
        if num_classes <= 0:
            raise ValueError("labeled corpus needs num_classes > 0")
    elif num_classes != 0:
        raise ValueError("unlabeled corpus must use num_classes = 0")

    c, k, t = windows[0].values.shape
    header = CorpusHeader(CORPUS_VERSION, len(windows), c, k, t, labels is not None, num_classes)
    header.validate()

    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(
            _HEADER_STRUCT.pack(
                header.version,
                header.num_samples,
                c,
                k,
                t,
                1 if header.has_labels else 0,
                header.num_classes,
            )
        )
        for i, w in enumerate(windows):
            if w.values.shape != (c, k, t):
                raise ValueError(f"window {i} shape {w.values.shape} != corpus shape {(c, k, t)}")
            if labels is not None:
                lab = int(labels[i])
                if not 0 <= lab < num_classes:
                    raise ValueError(f"label {lab} of sample {i} outside [0, {num_classes})")
                fh.write(np.uint16(lab).astype(_U16).tobytes())
            fh.write(np.ascontiguousarray(w.values, dtype=_F32).tobytes())


def read_corpus(path: str | Path) -> Corpus:
    """Read a corpus file; rejects bad magic, bad header, truncation, trailing bytes."""
    data = Path(path).read_bytes()
    if len(data) < len(CORPUS_MAGIC) + _HEADER_STRUCT.size:
        raise FileFormatError(f"{path}: file shorter than corpus header")
    if data[: len(CORPUS_MAGIC)] != CORPUS_MAGIC:
        raise FileFormatError(f"{path}: bad magic {data[:8]!r}")
    fields = _HEADER_STRUCT.unpack_from(data, len(CORPUS_MAGIC))
    header = CorpusHeader(
        version=fields[0],
        num_samples=fields[1],
        channels=fields[2],
        subcarriers=fields[3],
        time_steps=fields[4],
        has_labels=bool(fields[5]),
        num_classes=fields[6],
    )
    header.validate()

    per_value = header.channels * header.subcarriers * header.time_steps * 4
    per_sample = per_value + (2 if header.has_labels else 0)
    expected = len(CORPUS_MAGIC) + _HEADER_STRUCT.size + header.num_samples * per_sample
    if len(data) < expected:
        raise FileFormatError(
            f"{path}: truncated payload ({len(data)} bytes, expected {expected})"
        )
    if len(data) > expected:
        raise FileFormatError(
            f"{path}: {len(data) - expected} trailing bytes after declared payload"
        )

    shape = (header.channels, header.subcarriers, header.time_steps)
    windows: list[CsiWindow] = []
    labels: Optional[list[int]] = [] if header.has_labels else None
    off = len(CORPUS_MAGIC) + _HEADER_STRUCT.size
    for i in range(header.num_samples):
        if header.has_labels:
            lab = int(np.frombuffer(data, dtype=_U16, count=1, offset=off)[0])
            if lab >= header.num_classes:
                raise FileFormatError(
                    f"{path}: sample {i} label {lab} >= num_classes {header.num_classes}"
                )
            labels.append(lab)  # type: ignore[union-attr]
            off += 2
        vals = np.frombuffer(data, dtype=_F32, count=per_value // 4, offset=off).reshape(shape)
        if not np.all(np.isfinite(vals)):
            raise FileFormatError(f"{path}: sample {i} contains non-finite values")
        windows.append(CsiWindow(vals))
        off += per_value
    return Corpus(windows=windows, labels=labels, num_classes=header.num_classes)


# ---------------------------------------------------------------------------
# Named-tensor checkpoint primitives
# ---------------------------------------------------------------------------


def _manifest_path(path: str | Path) -> Path:
    return Path(str(path) + ".manifest")


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors as an f32 blob plus a ``name shape offset`` manifest.

    Tensor names may not contain whitespace. Iteration order is sorted by
    name so the blob layout is deterministic.
    """
    if not tensors:
        raise ValueError("refusing to write an empty checkpoint")
    lines = []
    offset = 0
    with open(path, "wb") as fh:
        for name in sorted(tensors):
            if any(ch.isspace() for ch in name):
                raise ValueError(f"tensor name {name!r} contains whitespace")
            arr = np.ascontiguousarray(tensors[name], dtype=_F32)
            if arr.ndim == 0:
                raise ValueError(f"tensor {name!r} is 0-d; store scalars as shape (1,)")
            fh.write(arr.tobytes())
            shape = ",".join(str(d) for d in arr.shape)
            lines.append(f"{name} {shape} {offset}")
            offset += arr.nbytes
    _manifest_path(path).write_text("\n".join(lines) + "\n")


def load_tensors(
    path: str | Path,
    expected_shapes: Optional[Mapping[str, tuple[int, ...]]] = None,
) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_tensors`.

    When ``expected_shapes`` is given, every listed tensor must be present
    with exactly that shape; the error names the offending tensor.
    """
    blob = Path(path).read_bytes()
    manifest = _manifest_path(path)
    if not manifest.exists():
        raise FileFormatError(f"{manifest}: manifest not found")
    out: dict[str, np.ndarray] = {}
    for ln, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FileFormatError(f"{manifest}:{ln}: expected 'name shape offset'")
        name, shape_s, offset_s = parts
        if name in out:
            raise FileFormatError(f"{manifest}:{ln}: duplicate tensor {name!r}")
        try:
            shape = tuple(int(d) for d in shape_s.split(","))
            offset = int(offset_s)
        except ValueError as exc:
            raise FileFormatError(f"{manifest}:{ln}: {exc}") from exc
        count = int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + count * 4 > len(blob):
            raise FileFormatError(
                f"{manifest}:{ln}: tensor {name!r} extends past blob end"
            )
        out[name] = np.frombuffer(blob, dtype=_F32, count=count, offset=offset).reshape(shape).copy()
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in out:
                raise FileFormatError(f"{path}: missing tensor {name!r}")
            if out[name].shape != tuple(shape):
                raise FileFormatError(
                    f"{path}: tensor {name!r} has shape {out[name].shape}, expected {tuple(shape)}"
                )
    return out


# ---------------------------------------------------------------------------
# Flat key=value config files
# ---------------------------------------------------------------------------


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FileFormatError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FileFormatError(f"{path}:{ln}: empty key")
        if key in out:
            raise FileFormatError(f"{path}:{ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out
