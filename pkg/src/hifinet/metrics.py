"""Full-reference quality metrics and dataset evaluation reports."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import losses
from .data import ImagePair
from .network import NetworkParams, hifi_forward
from .tensor import ShapeError, Tensor

ER3C_DELTA = 1e-8
METRIC_NAMES = ("mse", "psnr", "ssim", "er3c")


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _pair(pred, gt, name: str) -> tuple[np.ndarray, np.ndarray]:
    p, g = _array(pred), _array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"{name}: shapes differ, {p.shape} vs {g.shape}")
    return p, g


def mse(pred, gt) -> float:
    p, g = _pair(pred, gt, "mse")
    d = p.astype(np.float64) - g.astype(np.float64)
    return float(np.mean(d * d))


def psnr_from_mse(err: float, max_val: float = 1.0) -> float:
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / err)


def psnr(pred, gt, max_val: float = 1.0) -> float:
    """PSNR in dB; ``math.inf`` when the images are identical."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    return psnr_from_mse(mse(pred, gt), max_val)


def ssim(pred, gt) -> float:
    p, g = _pair(pred, gt, "ssim")
    if p.ndim == 3:
        p, g = p[None], g[None]
    return losses.ssim(Tensor(p.astype(np.float64)), Tensor(g.astype(np.float64))).item()


def er3c(pred, gt, delta: float = ER3C_DELTA) -> float:
    """Error of the ratio of three channels.

    Each pixel's RGB vector is divided by its own mean gray value; the metric
    is the per-pixel L1 distance between those ratio vectors, averaged over
    pixels (and over images for a batch).
    """
    p, g = _pair(pred, gt, "er3c")
    if p.ndim == 3:
        p, g = p[None], g[None]
    if p.ndim != 4 or p.shape[1] != 3:
        raise ValueError(f"er3c needs 3-channel images, got shape {p.shape}")
    p = p.astype(np.float64)
    g = g.astype(np.float64)
    ratio_p = p / (p.mean(axis=1, keepdims=True) + delta)
    ratio_g = g / (g.mean(axis=1, keepdims=True) + delta)
    per_pixel = np.abs(ratio_p - ratio_g).sum(axis=1)
    return float(per_pixel.mean())


@dataclass
class MetricRow:
    id: str
    mse: float
    psnr: float
    ssim: float
    er3c: float

    def values(self) -> tuple[float, float, float, float]:
        return self.mse, self.psnr, self.ssim, self.er3c


def compute_row(image_id: str, pred, gt) -> MetricRow:
    err = mse(pred, gt)
    return MetricRow(image_id, err, psnr_from_mse(err), ssim(pred, gt), er3c(pred, gt))


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _json_value(v: float):
    return _fmt(v) if math.isinf(v) or math.isnan(v) else v


@dataclass
class MetricReport:
    rows: list[MetricRow]
    errors: list[tuple[str, str]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.rows)

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for i, name in enumerate(METRIC_NAMES):
            col = np.array([r.values()[i] for r in self.rows], dtype=np.float64)
            if col.size == 0:
                out[name] = {"mean": math.nan, "std": math.nan}
                continue
            with np.errstate(invalid="ignore"):
                out[name] = {"mean": float(col.mean()), "std": float(col.std())}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + METRIC_NAMES)
        for r in self.rows:
            w.writerow((r.id,) + tuple(_fmt(v) for v in r.values()))
        return buf.getvalue()

    def to_json(self) -> str:
        agg = {
            k: {s: _json_value(v) for s, v in stats.items()}
            for k, stats in self.aggregate().items()
        }
        doc = {
            "count": self.count,
            "rows": [
                {"id": r.id, **{k: _json_value(v) for k, v in zip(METRIC_NAMES, r.values())}}
                for r in self.rows
            ],
            "aggregate": agg,
            "errors": [{"id": i, "error": e} for i, e in self.errors],
        }
        return json.dumps(doc, indent=2)

    def table(self) -> str:
        agg = self.aggregate()
        lines = [f"{'metric':<8}{'mean':>14}{'std':>14}"]
        for name in METRIC_NAMES:
            lines.append(f"{name:<8}{agg[name]['mean']:>14.6f}{agg[name]['std']:>14.6f}")
        lines.append(f"images: {self.count}  errors: {len(self.errors)}")
        return "\n".join(lines)

    def save(self, path: str) -> tuple[str, str]:
        """Write ``<stem>.csv`` and ``<stem>.json`` next to ``path``."""
        stem, _ = os.path.splitext(path)
        csv_path, json_path = stem + ".csv", stem + ".json"
        with open(csv_path, "w", newline="") as f:
            f.write(self.to_csv())
        with open(json_path, "w") as f:
            f.write(self.to_json())
        return csv_path, json_path


def enhance(image: Tensor, params: NetworkParams | None) -> np.ndarray:
    """Run the network (or pass through when ``params`` is None) and clamp to [0, 1]."""
    if params is None:
        out = image.data
    else:
        out = hifi_forward(Tensor(image.data.astype(params["f3_proj.bias"].dtype)), params).data
    return np.clip(out, 0.0, 1.0)


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("HIFI_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_dataset(pairs: Sequence[ImagePair], params: NetworkParams | None,
                     errors: Sequence[tuple[str, str]] = (), threads: int | None = None) -> MetricReport:
    """Enhance each degraded image and score it against its ground truth.

    Rows follow input order.  A pair that fails is recorded in ``errors`` and
    the run continues.
    """
    if not pairs:
        raise ValueError("evaluate_dataset needs at least one image pair")
    threads = threads or _thread_count()

    def one(pair: ImagePair):
        try:
            pred = enhance(pair.degraded, params)
            return compute_row(pair.id, pred, pair.ground_truth.data), None
        except Exception as exc:  # noqa: BLE001 - reported per item
            return None, (pair.id, f"{type(exc).__name__}: {exc}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    report = MetricReport(rows=[], errors=list(errors))
    for row, err in results:
        if row is not None:
            report.rows.append(row)
        else:
            report.errors.append(err)
    return report
