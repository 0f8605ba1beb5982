"""Time-series datasets: synthetic generator and CSV round-trip."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lineage import LineageTree

TRAIN, HELDOUT = "train", "heldout"


class DataError(ValueError):
    pass


@dataclass
class TimeSeriesDataset:
    """Labeled points with timepoint tags.

    ``times`` is NaN for labeled reference cells that belong to no timepoint;
    those only ever feed the classifier.
    """

    points: np.ndarray
    labels: np.ndarray
    times: np.ndarray
    class_names: tuple[str, ...]
    roles: dict[float, str] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.points.ndim != 2:
            raise DataError("points must be 2-D")
        n = len(self.points)
        if len(self.labels) != n or len(self.times) != n:
            raise DataError("points, labels and times must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label index out of range")
        if not self.roles:
            self.roles = default_roles(self.timepoints)
        for t in self.timepoints:
            if t not in self.roles:
                raise DataError(f"timepoint {t} has no role")
        if set(self.roles.values()) - {TRAIN, HELDOUT}:
            raise DataError(f"roles must be {TRAIN!r} or {HELDOUT!r}")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def timepoints(self) -> list[float]:
        return sorted({float(t) for t in self.times if not math.isnan(t)})

    @property
    def train_times(self) -> list[float]:
        return [t for t in self.timepoints if self.roles[t] == TRAIN]

    @property
    def heldout_times(self) -> list[float]:
        return [t for t in self.timepoints if self.roles[t] == HELDOUT]

    def at(self, t: float) -> np.ndarray:
        return self.points[self.times == t]

    def endpoints(self) -> tuple[float, float]:
        tr = self.train_times
        if len(tr) < 2:
            raise DataError("need at least two training timepoints")
        return tr[0], tr[-1]

    def normalized_time(self, t: float) -> float:
        """Affine map of physical time onto [0, 1] using the training endpoints."""
        t0, t1 = self.endpoints()
        return (t - t0) / (t1 - t0)

    def with_heldout(self, heldout) -> "TimeSeriesDataset":
        heldout = {float(h) for h in heldout}
        unknown = heldout - set(self.timepoints)
        if unknown:
            raise DataError(f"unknown held-out timepoints {sorted(unknown)}")
        roles = {t: HELDOUT if t in heldout else TRAIN for t in self.timepoints}
        return TimeSeriesDataset(self.points, self.labels, self.times, self.class_names, roles)


def default_roles(timepoints) -> dict[float, str]:
    if not timepoints:
        return {}
    lo, hi = min(timepoints), max(timepoints)
    return {t: TRAIN if t in (lo, hi) else HELDOUT for t in timepoints}


@dataclass(frozen=True)
class SyntheticConfig:
    dim: int = 2
    cluster_std: float = 0.1
    n_endpoint: int = 500
    n_intermediate: int = 25
    separation: float = 1.0
    offset: float = 0.95
    edges: tuple[tuple[int, int], ...] = ((0, 1), (1, 4))

    def centers(self) -> np.ndarray:
        s, d = self.separation, self.offset
        return np.array([[-s, 0.0], [0.0, d], [0.0, 0.0], [0.0, -d], [s, 0.0]])


def gen_synthetic(cfg: SyntheticConfig = SyntheticConfig(), seed: int = 0):
    """Five Gaussian clusters; the true lineage runs 0 -> 1 -> 4.

    Class 0 is observed at t=0, class 4 at t=2 and class 1 at the held-out
    t=1. Classes 2 (on the straight line between the endpoints) and 3 (the
    mirror image of class 1) are labeled reference cells without a timepoint.
    """
    if cfg.cluster_std <= 0:
        raise DataError("cluster_std must be positive")
    if cfg.n_endpoint < 1 or cfg.n_intermediate < 1:
        raise DataError("cluster counts must be >= 1")
    if cfg.dim < 2:
        raise DataError("synthetic layout needs dim >= 2")
    rng = np.random.default_rng(seed)
    centers = np.zeros((5, cfg.dim))
    centers[:, :2] = cfg.centers()
    spec = [
        (0, cfg.n_endpoint, 0.0),
        (4, cfg.n_endpoint, 2.0),
        (1, cfg.n_intermediate, 1.0),
        (2, cfg.n_intermediate, math.nan),
        (3, cfg.n_intermediate, math.nan),
    ]
    pts, labels, times = [], [], []
    for cls, count, t in spec:
        pts.append(centers[cls] + cfg.cluster_std * rng.standard_normal((count, cfg.dim)))
        labels.append(np.full(count, cls))
        times.append(np.full(count, t))
    names = tuple(str(i) for i in range(5))
    ds = TimeSeriesDataset(np.concatenate(pts), np.concatenate(labels), np.concatenate(times), names,
                           {0.0: TRAIN, 1.0: HELDOUT, 2.0: TRAIN})
    tree = LineageTree.from_edges(names, [(str(a), str(b)) for a, b in cfg.edges])
    return ds, tree


def save_dataset(ds: TimeSeriesDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        roles = ";".join(f"{t!r}={r}" for t, r in sorted(ds.roles.items()))
        fh.write(f"# roles: {roles}\n")
        w = csv.writer(fh)
        w.writerow(["t", "label"] + [f"x_{i + 1}" for i in range(ds.dim)])
        for t, lab, row in zip(ds.times, ds.labels, ds.points):
            w.writerow([repr(float(t)), ds.class_names[lab]] + [repr(float(v)) for v in row])


def _sort_names(names):
    try:
        return sorted(names, key=float)
    except ValueError:
        return sorted(names)


def load_dataset(path, class_names=None) -> TimeSeriesDataset:
    """Read ``t,label,x_1..x_n`` rows; an optional ``# roles:`` line precedes the header."""
    path = Path(path)
    roles: dict[float, str] = {}
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            if line.startswith("# roles:"):
                for item in filter(None, line[len("# roles:"):].strip().split(";")):
                    t, r = item.split("=")
                    roles[float(t)] = r.strip()
            continue
        body.append(line)
    reader = csv.reader(body)
    header = next(reader, None)
    if header is None or header[:2] != ["t", "label"] or len(header) < 3:
        raise DataError(f"{path}: header must be t,label,x_1,...")
    dim = len(header) - 2
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != dim + 2:
            raise DataError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(rec)}")
        try:
            rows.append((float(rec[0]), rec[1], [float(v) for v in rec[2:]]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed row") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    names = tuple(class_names) if class_names is not None else tuple(_sort_names({r[1] for r in rows}))
    index = {c: i for i, c in enumerate(names)}
    unknown = {r[1] for r in rows} - set(index)
    if unknown:
        raise DataError(f"{path}: unknown labels {sorted(unknown)}")
    return TimeSeriesDataset(
        np.array([r[2] for r in rows]),
        np.array([index[r[1]] for r in rows]),
        np.array([r[0] for r in rows]),
        names,
        roles,
    )


def component_seeds(master: int, names=("data", "classifier", "metric", "flow", "eval")) -> dict[str, int]:
    """Independent per-phase seeds derived from one master seed."""
    children = np.random.SeedSequence(master).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}
