"""Synthetic heteroscedastic 1-D regression data and ``x,y`` CSV I/O."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from hybridbnn.numerics import Rng


def true_function(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.6 * np.sin(4.0 * np.pi * x) + 0.3 * x


def noise_std(x):
    return 0.05 + 0.3 * np.asarray(x, dtype=np.float64)


def generate(n: int, seed: int = 0, x=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` points; ``x`` pins the inputs instead of sampling them on [0, 1]."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = Rng(seed)
    x = rng.uniform(0.0, 1.0, n) if x is None else np.broadcast_to(np.asarray(x, dtype=np.float64), (n,)).copy()
    y = true_function(x) + noise_std(x) * rng.normal(n)
    return x, y


def fmt(v) -> str:
    """Shortest decimal string that round-trips to the same value."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, columns) -> None:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([fmt(v) for v in row])


def read_csv(path, header) -> list[np.ndarray]:
    """Read numeric columns named in ``header`` from a CSV with a header row."""
    with Path(path).open(newline="") as f:
        reader = csv.reader(f)
        try:
            found = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        missing = [h for h in header if h not in found]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        idx = [found.index(h) for h in header]
        rows = [[float(r[i]) for i in idx] for r in reader if r]
    if not rows:
        return [np.zeros(0) for _ in header]
    arr = np.array(rows, dtype=np.float64)
    return [arr[:, j] for j in range(len(header))]


def write_dataset(path, x, y) -> None:
    write_csv(path, ["x", "y"], [x, y])


def read_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    x, y = read_csv(path, ["x", "y"])
    return x, y
