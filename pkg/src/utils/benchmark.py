"""
Latency statistics and speed/accuracy Pareto frontiers.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PARETO_SCHEMA = "cte-pareto/1"
PARETO_COLUMNS = ["config-id", "M", "K", "tree-shape", "latency-us", "error", "frontier", "status"]


@dataclass(frozen=True)
class LatencyStats:
    """Per-call latency summary in microseconds"""

    median_us: float
    p95_us: float
    mean_us: float
    count: int

    @classmethod
    def from_seconds(cls, samples: Sequence[float]) -> "LatencyStats":
        if len(samples) == 0:
            return cls(0.0, 0.0, 0.0, 0)
        us = np.asarray(samples, dtype=np.float64) * 1e6
        return cls(float(np.median(us)), float(np.percentile(us, 95)), float(us.mean()), len(us))

    def to_dict(self) -> Dict:
        return asdict(self)


def time_calls(fn: Callable, items: Sequence, warmup: int = 1) -> List[float]:
    """
    Wall-clock seconds of ``fn(item)`` for every item

    The first ``warmup`` items are run once untimed before measuring.
    """
    for item in items[:warmup]:
        fn(item)
    samples = []
    for item in items:
        start = time.perf_counter()
        fn(item)
        samples.append(time.perf_counter() - start)
    return samples


@dataclass
class ParetoPoint:
    config_id: str
    table_count: int
    bit_count: int
    tree_shape: str
    latency_us: float = float("nan")
    error: float = float("nan")
    frontier: bool = False
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def pareto_frontier(points: Sequence[ParetoPoint]) -> List[ParetoPoint]:
    """
    Mark the points no other point dominates

    A point dominates another when it is no slower and no less accurate and
    strictly better in at least one of the two. Failed points never join the
    frontier. Sorting by (latency, error) and keeping each point whose error
    beats every faster point's error is enough.

    Returns:
        The same points, with ``frontier`` set
    """
    for point in points:
        point.frontier = False
    candidates = sorted((p for p in points if p.ok), key=lambda p: (p.latency_us, p.error))
    best_error = float("inf")
    previous = None
    for point in candidates:
        if point.error < best_error:
            point.frontier = True
            best_error = point.error
        elif (previous is not None and previous.frontier
              and point.latency_us == previous.latency_us and point.error == previous.error):
            # exact duplicates of a frontier point are not dominated either
            point.frontier = True
        previous = point
    return list(points)


def write_pareto_csv(points: Sequence[ParetoPoint], path: Path):
    """Write sweep results with the versioned header line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        handle.write(f"# {PARETO_SCHEMA}\n")
        writer = csv.writer(handle)
        writer.writerow(PARETO_COLUMNS)
        for p in points:
            writer.writerow([
                p.config_id, p.table_count, p.bit_count, p.tree_shape,
                f"{p.latency_us:.3f}", f"{p.error:.6f}", int(p.frontier), p.status,
            ])
    logger.info("Wrote %d Pareto points to %s", len(points), path)


def read_pareto_csv(path: Path) -> List[ParetoPoint]:
    with open(path, newline="") as handle:
        header = handle.readline().strip()
        if header != f"# {PARETO_SCHEMA}":
            raise ValueError(f"Unexpected Pareto CSV header {header!r} in {path}")
        rows = list(csv.DictReader(handle))
    return [
        ParetoPoint(
            config_id=row["config-id"],
            table_count=int(row["M"]),
            bit_count=int(row["K"]),
            tree_shape=row["tree-shape"],
            latency_us=float(row["latency-us"]),
            error=float(row["error"]),
            frontier=row["frontier"] == "1",
            status=row["status"],
        )
        for row in rows
    ]


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Coefficient of determination of a least-squares line through the points"""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) < 2:
        return None
    slope, intercept = np.polyfit(xs, ys, 1)
    residual = ys - (slope * xs + intercept)
    total = ((ys - ys.mean()) ** 2).sum()
    return 1.0 if total == 0 else float(1.0 - (residual ** 2).sum() / total)
