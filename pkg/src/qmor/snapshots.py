"""Snapshot storage, the binary snapshot format, and POD bases."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import thin_svd

SNAP_MAGIC = "QMOR-SNAP"
FLOAT = np.dtype("<f8")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class SnapshotSet:
    states: np.ndarray
    times: np.ndarray
    u_ref: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] < 1:
            raise ValueError("snapshot set needs at least one column")
        times = np.asarray(self.times, dtype=float)
        if times.shape != (states.shape[1],):
            raise ValueError("one time stamp per snapshot column is required")
        if np.any(np.diff(times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        if np.shape(self.u_ref) != (states.shape[0],):
            raise ValueError("u_ref length must match the state dimension")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "u_ref", np.asarray(self.u_ref, dtype=float))

    @property
    def dimension(self) -> int:
        return self.states.shape[0]

    @property
    def count(self) -> int:
        return self.states.shape[1]

    def centered(self) -> np.ndarray:
        return self.states - self.u_ref[:, None]


@dataclass(frozen=True)
class ReducedBasis:
    basis: np.ndarray
    singular_values: np.ndarray
    discarded_energy: float = 0.0

    @property
    def dimension(self) -> int:
        return self.basis.shape[1]

    def truncate(self, n: int) -> "ReducedBasis":
        """Leading ``n`` columns; discarded energy is recomputed when possible."""
        if not 1 <= n <= self.dimension:
            raise ValueError(f"cannot truncate a dimension-{self.dimension} basis to {n}")
        s2 = self.singular_values**2
        total = s2.sum() / max(1.0 - self.discarded_energy, np.finfo(float).tiny)
        kept = s2[:n].sum()
        return ReducedBasis(self.basis[:, :n].copy(), self.singular_values[:n].copy(),
                            float(max(0.0, 1.0 - kept / total)))


def energy_dimension(sigma: np.ndarray, epsilon: float) -> int:
    """Smallest n whose leading squared singular values hold 1 - epsilon of the energy."""
    energy = np.cumsum(sigma**2)
    # small slack so that exact-rank data is not pushed past its rank by rounding
    ratio = energy / energy[-1]
    return int(min(np.searchsorted(ratio, 1.0 - epsilon - 1e-15) + 1, sigma.size))


def pod_basis(snaps: SnapshotSet, epsilon: float) -> ReducedBasis:
    """POD of the u_ref-centered snapshots truncated by the energy criterion."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    centered = snaps.centered()
    if not np.any(centered):
        raise ValueError("zero-energy snapshot set")
    svd = thin_svd(centered)
    n = energy_dimension(svd.singular_values, epsilon)
    s2 = svd.singular_values**2
    return ReducedBasis(svd.left[:, :n].copy(), svd.singular_values[:n].copy(),
                        float(s2[n:].sum() / s2.sum()))


def payload_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=FLOAT).tobytes())
    return h.hexdigest()[:16]


def parse_header(line: bytes, magic: str) -> dict[str, str]:
    try:
        text = line.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ASCII") from exc
    parts = text.split()
    if len(parts) < 2 or parts[0] != magic or parts[1] != "v1":
        raise FormatError(f"malformed header: expected '{magic} v1 ...'")
    fields = {}
    for token in parts[2:]:
        key, sep, value = token.partition("=")
        if not sep:
            raise FormatError(f"malformed header token {token!r}")
        fields[key] = value
    return fields


def read_floats(buf: bytes, offset: int, count: int, what: str) -> tuple[np.ndarray, int]:
    need = count * FLOAT.itemsize
    have = len(buf) - offset
    if have < need:
        raise FormatError(f"truncated file: {what} is missing {need - have} bytes")
    arr = np.frombuffer(buf, dtype=FLOAT, count=count, offset=offset).astype(float)
    return arr, offset + need


def save_snapshots(snaps: SnapshotSet, path) -> None:
    """Write the header line, the time stamps, the states (column-major), then u_ref."""
    states = np.asfortranarray(snaps.states)
    digest = payload_digest(snaps.times, states.ravel(order="F"), snaps.u_ref)
    header = f"{SNAP_MAGIC} v1 N={snaps.dimension} NS={snaps.count} uref=1 sha256={digest}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(snaps.times.astype(FLOAT).tobytes())
        fh.write(states.ravel(order="F").astype(FLOAT).tobytes())
        fh.write(snaps.u_ref.astype(FLOAT).tobytes())


def load_snapshots(path) -> SnapshotSet:
    buf = Path(path).read_bytes()
    end = buf.find(b"\n")
    if end < 0:
        raise FormatError("malformed header: no newline")
    fields = parse_header(buf[:end], SNAP_MAGIC)
    try:
        n, ns = int(fields["N"]), int(fields["NS"])
    except (KeyError, ValueError) as exc:
        raise FormatError("malformed header: N and NS are required integers") from exc
    if n < 1 or ns < 1:
        raise FormatError("malformed header: N and NS must be positive")
    if fields.get("uref", "1") != "1":
        raise FormatError("snapshot files must carry u_ref")
    off = end + 1
    times, off = read_floats(buf, off, ns, "time stamps")
    flat, off = read_floats(buf, off, n * ns, "state payload")
    u_ref, off = read_floats(buf, off, n, "u_ref")
    if off != len(buf):
        raise FormatError(f"dimension mismatch: {len(buf) - off} trailing bytes after payload "
                          f"declared by N={n} NS={ns}")
    if "sha256" in fields and fields["sha256"] != payload_digest(times, flat, u_ref):
        raise FormatError("checksum mismatch")
    if np.any(np.diff(times) <= 0):
        raise FormatError("snapshot times are not strictly increasing")
    return SnapshotSet(flat.reshape((n, ns), order="F"), times, u_ref)
