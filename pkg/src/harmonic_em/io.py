"""Columnar trajectory files and matrix files, each headed by a manifest hash comment."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np


class TrajectoryFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def manifest_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def header_line(digest: str) -> str:
    return f"# manifest_sha256={digest}\n"


def write_trajectory(path: str, digest: str, steps, replicas, times, coords, vels=None) -> int:
    """Write rows ``step,replica,time,coord_0..,vel_0..``; returns the row count."""
    coords = np.asarray(coords, dtype=float)
    d = coords.shape[-1]
    cols = ["step", "replica", "time"] + [f"coord_{i}" for i in range(d)]
    if vels is not None:
        cols += [f"vel_{i}" for i in range(d)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header_line(digest))
        fh.write(",".join(cols) + "\n")
        for i in range(coords.shape[0]):
            row = [str(int(steps[i])), str(int(replicas[i])), fmt(times[i])] + [fmt(c) for c in coords[i]]
            if vels is not None:
                row += [fmt(c) for c in vels[i]]
            fh.write(",".join(row) + "\n")
    return coords.shape[0]


@dataclass
class TrajectoryTable:
    step: np.ndarray
    replica: np.ndarray
    time: np.ndarray
    coords: np.ndarray
    vels: np.ndarray | None
    digest: str | None

    @property
    def replicas(self) -> np.ndarray:
        return np.unique(self.replica)

    def series(self, replica: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(steps, times, coords) of one replica in step order."""
        sel = self.replica == replica
        order = np.argsort(self.step[sel], kind="stable")
        return self.step[sel][order], self.time[sel][order], self.coords[sel][order]


def read_trajectory(path: str) -> TrajectoryTable:
    digest = None
    header = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                if "manifest_sha256=" in s:
                    digest = s.split("manifest_sha256=", 1)[1].strip()
                continue
            if header is None:
                header = s.split(",")
                if header[:3] != ["step", "replica", "time"] or len(header) < 4:
                    raise TrajectoryFormatError("expected header step,replica,time,coord_0,...", lineno)
                continue
            parts = s.split(",")
            if len(parts) != len(header):
                raise TrajectoryFormatError(f"expected {len(header)} fields, found {len(parts)}", lineno)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise TrajectoryFormatError("non-numeric field", lineno) from None
    if header is None or not rows:
        raise TrajectoryFormatError("no trajectory rows found")
    data = np.array(rows)
    n_coord = sum(1 for c in header if c.startswith("coord_"))
    n_vel = sum(1 for c in header if c.startswith("vel_"))
    coords = data[:, 3:3 + n_coord]
    vels = data[:, 3 + n_coord:3 + n_coord + n_vel] if n_vel else None
    return TrajectoryTable(data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2], coords, vels, digest)


def write_matrix(path: str, digest: str, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header_line(digest))
        fh.write(f"{M.shape[0]} {M.shape[1]}\n")
        for row in M:
            fh.write(" ".join(fmt(v) for v in row) + "\n")


def read_matrix(path: str) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    r, c = (int(v) for v in lines[0].split())
    M = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    if M.shape != (r, c):
        raise TrajectoryFormatError(f"matrix shape {M.shape} does not match header {r} {c}")
    return M


def write_table(path: str, digest: str, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    n = len(next(iter(columns.values())))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header_line(digest))
        fh.write(",".join(names) + "\n")
        for i in range(n):
            fh.write(",".join(fmt(columns[c][i]) for c in names) + "\n")
