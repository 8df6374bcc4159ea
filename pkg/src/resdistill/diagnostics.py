"""Distribution diagnostics: pairwise-distance CDFs, 1-D KDEs, QQ data, and
deterministic report emission.

Everything here produces plottable data, not rendered plots. Files are written
with stable formatting (repr floats, sorted JSON keys) so re-emission of the
same artifacts is byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

REPORT_VERSION = "resdistill-report-1"


@dataclass
class CurveData:
    kind: str  # "cdf" | "kde" | "qq"
    points: list[tuple[float, float]]
    meta: dict = field(default_factory=dict)  # metric name, source run ids

    def __post_init__(self):
        if self.kind not in ("cdf", "kde", "qq"):
            raise ValidationError(f"unknown curve kind {self.kind!r}")
        ys = [y for _, y in self.points]
        if self.kind == "cdf":
            if ys and (any(b < a for a, b in zip(ys, ys[1:])) or abs(ys[-1] - 1.0) > 1e-12):
                raise ValidationError("cdf y values must be non-decreasing and end at 1")
        if self.kind == "kde" and any(y < 0 for y in ys):
            raise ValidationError("kde density must be non-negative")

    @property
    def metric(self) -> str:
        return self.meta.get("metric", "")


def pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    """All n(n-1)/2 Euclidean distances, pair order (i, j) with i < j."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or len(e) < 2:
        raise ValidationError("need at least 2 embeddings of equal dimension")
    ii, jj = np.triu_indices(len(e), k=1)
    diff = e[ii] - e[jj]
    return np.sqrt(np.sum(diff * diff, axis=1))


def pairwise_distance_cdf(embeddings, metric: str = "euclidean-raw") -> CurveData:
    """Empirical CDF over all pairwise Euclidean distances.

    `metric` labels the space the embeddings came from (raw pixels or feature
    maps); the distance is Euclidean either way. Equal distances merge into one
    step whose height is their multiplicity, so the distance multiset is
    recoverable from the steps.
    """
    if metric not in ("euclidean-raw", "euclidean-feature"):
        raise ValidationError(f"unknown metric {metric!r}")
    dists = np.sort(pairwise_distances(embeddings), kind="stable")
    total = len(dists)
    values, counts = np.unique(dists, return_counts=True)
    cum = np.cumsum(counts)
    points = [(float(v), float(c) / total) for v, c in zip(values, cum)]
    return CurveData(kind="cdf", points=points, meta={"metric": metric, "pairs": total})


def silverman_bandwidth(samples: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5); requires spread in the samples."""
    s = np.asarray(samples, dtype=np.float64)
    std = float(np.std(s, ddof=1)) if len(s) > 1 else 0.0
    q75, q25 = np.percentile(s, [75.0, 25.0])
    iqr = float(q75 - q25)
    spread = min(x for x in (std, iqr / 1.34) if x > 0) if (std > 0 or iqr > 0) else 0.0
    h = 0.9 * spread * len(s) ** (-0.2)
    if h <= 0:
        raise ValidationError(
            "samples have no spread; pass an explicit bandwidth")
    return h


def kde_1d(samples, bandwidth: float | None = None, grid=None) -> CurveData:
    """Gaussian kernel density on `grid`; bandwidth defaults to Silverman's rule."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    if len(s) == 0:
        raise ValidationError("samples must be nonempty")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(s)
    if bandwidth <= 0:
        raise ValidationError(f"bandwidth must be > 0, got {bandwidth}")
    if grid is None:
        lo, hi = s.min() - 3 * bandwidth, s.max() + 3 * bandwidth
        grid = np.linspace(lo, hi, 256)
    g = np.asarray(grid, dtype=np.float64).ravel()
    z = (g[:, None] - s[None, :]) / bandwidth
    dens = np.exp(-0.5 * z * z).mean(axis=1) / (bandwidth * math.sqrt(2.0 * math.pi))
    points = [(float(x), float(d)) for x, d in zip(g, dens)]
    return CurveData(kind="kde", points=points, meta={"bandwidth": float(bandwidth)})


def qq_points(sample_a, sample_b, q: int = 64) -> CurveData:
    """q quantile pairs at evenly spaced probabilities: x from sample_b, y from sample_a."""
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("both samples must be nonempty")
    if q < 2:
        raise ValidationError(f"q must be >= 2, got {q}")
    probs = np.linspace(0.0, 1.0, q)
    qa = np.quantile(a, probs, method="linear")
    qb = np.quantile(b, probs, method="linear")
    points = [(float(x), float(y)) for x, y in zip(qb, qa)]
    return CurveData(kind="qq", points=points, meta={"quantiles": int(q)})


def _cell(value) -> str:
    """Stable text form: repr for floats, inf/nan sentinels, str otherwise."""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    if value is None:
        return ""
    return str(value)


def _sanitize(obj):
    """JSON-safe copy with inf/nan mapped to sentinel strings."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _sanitize(float(obj))
    return obj


def save_curves_csv(curves, path: Path):
    """All curves in one CSV with header (kind, metric, x, y)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "metric", "x", "y"])
        for curve in curves:
            for x, y in curve.points:
                writer.writerow([curve.kind, curve.metric, _cell(float(x)), _cell(float(y))])


def save_table_csv(rows, path: Path, columns=None):
    """Rows of dicts to CSV; column order from `columns` or the first row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])


def emit_report(out_dir: Path, tables: dict, curves=(), meta: dict | None = None) -> dict:
    """Write tables, curves, and an index file; byte-identical on re-emission.

    `tables` maps name -> (rows, columns or None). Returns the index structure.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc

    index = {"version": REPORT_VERSION, "meta": _sanitize(meta or {}),
             "tables": {}, "curves": []}
    for name in sorted(tables):
        rows, columns = tables[name]
        rel = f"tables/{name}.csv"
        save_table_csv(rows, out_dir / rel, columns)
        index["tables"][name] = rel
    save_curves_csv(curves, out_dir / "curves.csv")
    index["curves"] = [{"kind": c.kind, "meta": _sanitize(c.meta)} for c in curves]
    (out_dir / "index.json").write_text(
        json.dumps(index, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return index
