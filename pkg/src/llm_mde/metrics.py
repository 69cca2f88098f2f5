"""Standard monocular-depth error and accuracy metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import DepthMap
from .errors import MetricsError

METRIC_NAMES = ("rmse", "abs_rel", "sq_rel", "log_rmse", "delta1", "delta2", "delta3")
HIGHER_IS_BETTER = frozenset({"delta1", "delta2", "delta3"})


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    abs_rel: float
    sq_rel: float
    log_rmse: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def csv_row(self) -> list:
        return [repr(getattr(self, k)) for k in METRIC_NAMES] + [self.n_valid]

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in (*METRIC_NAMES, "n_valid")})


def _unwrap(x, mask):
    if isinstance(x, DepthMap):
        mask = x.valid_mask if mask is None else mask & x.valid_mask
        x = x.depth
    return np.asarray(x, dtype=np.float64), mask


def compute_metrics(pred, gt, valid_mask=None, cap: float | None = 10.0) -> MetricsReport:
    """Metrics over pixels where the mask holds and both depths are positive.

    With ``cap`` set, pixels whose ground truth exceeds it are dropped and
    predictions are clipped to it.
    """
    pred, pmask = _unwrap(pred, None)
    gt, mask = _unwrap(gt, valid_mask)
    if pred.shape != gt.shape:
        raise MetricsError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = (pred > 0) & (gt > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if pmask is not None:
        valid &= pmask
    if cap is not None:
        valid &= gt <= cap
    if not valid.any():
        raise MetricsError("no valid pixels")
    d, p = gt[valid], pred[valid]
    if cap is not None:
        p = np.minimum(p, cap)
    err = d - p
    ratio = np.maximum(d / p, p / d)
    log_diff = np.log(d) - np.log(p)
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        abs_rel=float(np.mean(np.abs(err) / d)),
        sq_rel=float(np.mean(err ** 2 / d)),
        log_rmse=float(np.sqrt(np.mean(log_diff ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_valid=int(valid.sum()),
    )
