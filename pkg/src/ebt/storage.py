"""On-disk formats: EBTM tensor files, landmark/parameter text files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .face_model import FaceBasis
from .tensor import ParamStore

MAGIC = b"EBTM"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ModelFormatError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f4")
        if a.ndim > 255:
            raise ModelFormatError(f"{name}: rank {a.ndim} too large")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_tensors(raw: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise ModelFormatError(f"{source}: bad magic")
    if len(raw) < 12:
        raise ModelFormatError(f"{source}: truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ModelFormatError(f"{source}: unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ModelFormatError(f"{source}: truncated payload")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if name in out:
            raise ModelFormatError(f"{source}: duplicate tensor name {name!r}")
        out[name] = data
    if pos != len(raw):
        raise ModelFormatError(f"{source}: {len(raw) - pos} trailing bytes")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes(), str(path))


def save_model(store: ParamStore, path) -> None:
    save_tensors(path, {name: t.data for name, t in store.items()})


def load_model(path) -> ParamStore:
    """Parameters come back with fresh optimiser state."""
    store = ParamStore()
    for name, arr in load_tensors(path).items():
        store.add(name, arr)
    return store


# ---------------------------------------------------------------------------
# face basis


def basis_tensors(basis: FaceBasis) -> dict[str, np.ndarray]:
    return {
        "basis/mean_shape": basis.mean_shape,
        "basis/geometry_basis": basis.geometry_basis,
        "basis/expression_basis": basis.expression_basis,
        "basis/geometry_sigma": basis.geometry_sigma,
        "basis/expression_sigma": basis.expression_sigma,
        "basis/landmark_indices": basis.landmark_indices,
        "basis/mouth": basis.mouth,
        "basis/jaw": basis.jaw,
    }


def basis_from_tensors(t: dict[str, np.ndarray]) -> FaceBasis:
    f = lambda k: t[f"basis/{k}"].astype(np.float64)  # noqa: E731
    i = lambda k: np.rint(t[f"basis/{k}"]).astype(np.int64)  # noqa: E731
    # columns stay unit norm to f32 precision, well inside the basis check
    return FaceBasis(
        f("mean_shape"),
        f("geometry_basis"),
        f("expression_basis"),
        f("geometry_sigma"),
        f("expression_sigma"),
        i("landmark_indices"),
        i("mouth"),
        i("jaw"),
    )


def quantize_basis(basis: FaceBasis) -> FaceBasis:
    """The basis exactly as it reads back from disk."""
    return basis_from_tensors({k: np.asarray(v, dtype=np.float32) for k, v in basis_tensors(basis).items()})


# ---------------------------------------------------------------------------
# text matrices (landmarks, parameters, plans)


def save_rows(path, rows) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    with open(path, "w") as f:
        for r in rows:
            f.write(" ".join(repr(float(v)) for v in r) + "\n")


def load_rows(path, width: int | None = None) -> np.ndarray:
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        return np.zeros((0, width or 0))
    n = len(lines[0])
    if any(len(ln) != n for ln in lines) or (width is not None and n != width):
        raise ValueError(f"{path}: rows must all have {width or n} values")
    return np.array([[float(v) for v in ln] for ln in lines])


def save_landmarks(path, track) -> None:
    """One frame per line: ``x0 y0 x1 y1 ...``."""
    track = np.asarray(track, dtype=np.float64)
    save_rows(path, track.reshape(track.shape[0], -1))


def load_landmarks(path, n_points: int) -> np.ndarray:
    return load_rows(path, 2 * n_points).reshape(-1, n_points, 2)
