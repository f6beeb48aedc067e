"""Synthetic data generation and the on-disk formats used by the CLI.

Formats:
  dataset CSV   header row, one point per line, optional leading label column
  dataset blob  magic "ATSD", u32 N, u32 D, then N*D little-endian f32
  stream file   header "timestamp_ms,label,f1..fD", one reading per line
  embedding CSV "id,x,y,rho"
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .points import PointStore

DATASET_MAGIC = b"ATSD"


def make_clusters(n: int, dim: int, clusters: int = 10, separation: float = 6.0,
                  cluster_std: float = 1.0, seed: int = 0):
    """Labeled Gaussian blobs. Returns (coords, labels).

    Cluster centers sit at separation * unit directions drawn once per
    cluster; separation/cluster_std is the knob for how hard the
    neighborhoods are.
    """
    if clusters < 1 or n < clusters:
        raise ValueError("need at least one point per cluster")
    rng = np.random.default_rng([seed, 301])
    dirs = rng.normal(size=(clusters, dim))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    centers = dirs * separation
    assign = np.sort(rng.integers(0, clusters, size=n))
    # guarantee every cluster is populated
    assign[:clusters] = np.arange(clusters)
    coords = centers[assign] + rng.normal(0.0, cluster_std, size=(n, dim))
    labels = [f"c{a}" for a in assign]
    return coords, labels


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def save_csv(path, coords: np.ndarray, labels=None) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = [f"f{k + 1}" for k in range(coords.shape[1])]
        if labels is not None:
            w.writerow(["label"] + cols)
            for lab, row in zip(labels, coords):
                w.writerow([lab] + [repr(float(v)) for v in row])
        else:
            w.writerow(cols)
            for row in coords:
                w.writerow([repr(float(v)) for v in row])


def load_csv(path):
    """Returns (coords, labels or None). Header required."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None:
            raise ValueError("empty dataset file")
        has_label = header[0].strip().lower() == "label"
        start = 1 if has_label else 0
        rows = []
        labels = [] if has_label else None
        for line in r:
            if not line:
                continue
            if has_label:
                labels.append(line[0])
            rows.append([float(v) for v in line[start:]])
    if not rows:
        raise ValueError("dataset has a header but no rows")
    return np.asarray(rows, dtype=np.float64), labels


def save_binary(path, coords: np.ndarray) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    n, d = coords.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", DATASET_MAGIC, n, d))
        fh.write(coords.astype("<f4").tobytes(order="C"))


def load_binary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != DATASET_MAGIC:
        raise ValueError("not a dataset blob")
    _, n, d = struct.unpack("<4sII", blob[:12])
    if len(blob) != 12 + n * d * 4:
        raise ValueError("dataset blob length mismatch")
    return np.frombuffer(blob[12:], dtype="<f4").reshape(n, d).astype(np.float64)


def load_points(path) -> PointStore:
    """Dispatch on content: binary blob or CSV with header."""
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(4)
    if head == DATASET_MAGIC:
        coords = load_binary(p)
        labels = None
    else:
        coords, labels = load_csv(p)
    return PointStore.from_array(coords, labels)


# ---------------------------------------------------------------------------
# stream files
# ---------------------------------------------------------------------------

def save_stream(path, timestamps_ms, labels, coords: np.ndarray) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_ms", "label"]
                   + [f"f{k + 1}" for k in range(coords.shape[1])])
        for t, lab, row in zip(timestamps_ms, labels, coords):
            w.writerow([int(t), lab] + [repr(float(v)) for v in row])


def load_stream(path):
    """Parse a stream replay file; bad lines are skipped, not fatal.

    Returns (readings, skipped) where readings is a list of
    (timestamp_ms, label, vector).
    """
    readings = []
    skipped = 0
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or header[0].strip().lower() != "timestamp_ms":
            raise ValueError("missing stream header")
        width = len(header) - 2
        for line in r:
            if not line:
                continue
            try:
                t = int(line[0])
                vec = np.array([float(v) for v in line[2:]], dtype=np.float64)
                if vec.shape[0] != width:
                    raise ValueError
            except (ValueError, IndexError):
                skipped += 1
                continue
            readings.append((t, line[1], vec))
    return readings, skipped


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def save_embedding_csv(path, ids, positions: np.ndarray, rho) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "rho"])
        for pid, (x, y), r in zip(ids, positions, rho):
            w.writerow([int(pid), repr(float(x)), repr(float(y)),
                        repr(float(r))])


def load_embedding_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["id", "x", "y", "rho"]:
            raise ValueError("not an embedding export")
        ids, xy, rho = [], [], []
        for line in r:
            if not line:
                continue
            ids.append(int(line[0]))
            xy.append((float(line[1]), float(line[2])))
            rho.append(float(line[3]))
    return (np.asarray(ids, dtype=np.int64), np.asarray(xy, dtype=np.float64),
            np.asarray(rho, dtype=np.float64))
