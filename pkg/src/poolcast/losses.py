"""Scalar losses and evaluation metrics.

Huber and pinball are the two training/selection losses; MSE and MAE are the
reporting metrics. Components are always averaged with equal weight, and in
the multi-quantile case levels are averaged too. Degenerate cases (no valid
windows) return None so callers can exclude the pair instead of biasing a
mean with zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def huber(pred, target, delta: float = 1.0) -> float:
    """Component-mean Huber loss: quadratic within delta, linear outside."""
    e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(huber_elem(e, delta)))


def huber_elem(e: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * a - 0.5 * delta * delta)


def huber_deriv(e: np.ndarray, delta: float) -> np.ndarray:
    """d huber_elem / d e (the prediction side carries the same sign)."""
    return np.clip(e, -delta, delta)


def pinball(pred: float, target: float, q: float) -> float:
    """Pinball loss rho_q(u) = u * (q - 1{u < 0}) with u = target - pred."""
    u = target - pred
    return float(u * (q - (1.0 if u < 0 else 0.0)))


def pinball_elem(pred: np.ndarray, target: np.ndarray, q) -> np.ndarray:
    u = target - pred
    return u * (q - (u < 0))


def pinball_deriv_wrt_pred(pred: np.ndarray, target: np.ndarray, q) -> np.ndarray:
    u = target - pred
    return (u < 0) - q


def multi_pinball(preds: np.ndarray, target: np.ndarray, levels) -> float:
    """Mean pinball over components and quantile levels.

    ``preds`` has shape (Q, P) (or (..., Q, P)); ``target`` shape (P,)
    (or broadcastable); ``levels`` is the increasing quantile grid.
    """
    preds = np.asarray(preds, dtype=np.float64)
    q = np.asarray(levels, dtype=np.float64).reshape((-1, 1))
    target = np.asarray(target, dtype=np.float64)
    vals = pinball_elem(preds, target[..., None, :], q)
    return float(vals.mean())


def mse(pred, target) -> float:
    e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(e * e))


def mae(pred, target) -> float:
    e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(np.abs(e)))


def empirical_quantile(sample, q: float) -> float:
    """Smallest sample value y with F_n(y) >= q (the sort oracle)."""
    ys = np.sort(np.asarray(sample, dtype=np.float64))
    n = len(ys)
    k = int(np.ceil(q * n))
    return float(ys[max(k, 1) - 1])


# ---------------------------------------------------------------------------
# model-level split losses
# ---------------------------------------------------------------------------


def per_series_split_losses(params, prepared, tag: str, h: int, cfg,
                            kind: str | None = None,
                            series=None) -> np.ndarray | None:
    """Per-series mean forecasting loss on one segment at one horizon.

    Uses recursive rollout for h > 1. ``kind`` overrides the loss implied by
    the config mode ("huber", "pinball", or "mse"; MSE is evaluated on the
    point forecast, i.e. the median path in quantile mode). Returns an array
    of shape (n_series_selected,), or None when the window index is empty.
    """
    from . import model  # deferred: model depends on this module for losses

    if series is None:
        series = np.arange(prepared.n_series)
    series = np.asarray(series, dtype=np.int64)
    x, y = prepared.per_series_windows(tag, h, cfg.w, series)
    if x.shape[1] == 0:
        return None
    s, n, w, p = x.shape
    kind = kind or ("pinball" if cfg.mode == "quantile" else "huber")
    xf = x.reshape(s * n, w, p)
    if kind == "pinball":
        preds = model.rollout(params, xf, h, mode="quantile", levels=cfg.quantiles)
        q = np.asarray(cfg.quantiles).reshape((-1, 1))
        per = pinball_elem(preds, y.reshape(s * n, 1, p), q).mean(axis=(1, 2))
    else:
        if cfg.mode == "quantile":
            fan = model.rollout(params, xf, h, mode="quantile", levels=cfg.quantiles)
            preds = fan[:, model.median_index(cfg.quantiles), :]
        else:
            preds = model.rollout(params, xf, h, mode="point")
        e = preds - y.reshape(s * n, p)
        if kind == "huber":
            per = huber_elem(e, cfg.huber_delta).mean(axis=1)
        elif kind == "mse":
            per = (e * e).mean(axis=1)
        else:
            raise ValueError(f"unknown loss kind {kind!r}")
    return per.reshape(s, n).mean(axis=1)


def split_mean_loss(params, prepared, series: int, tag: str, h: int, cfg,
                    kind: str | None = None) -> float | None:
    """Mean per-window loss of one series on one segment; None when empty."""
    out = per_series_split_losses(params, prepared, tag, h, cfg, kind=kind,
                                  series=[series])
    return None if out is None else float(out[0])


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def interval_stats(target: np.ndarray, lower: np.ndarray, upper: np.ndarray
                   ) -> tuple[float, float]:
    """(coverage, mean width) of elementwise intervals."""
    target = np.asarray(target, dtype=np.float64)
    inside = (target >= lower) & (target <= upper)
    return float(inside.mean()), float(np.mean(upper - lower))


@dataclass
class MetricRow:
    method: str
    horizon: int
    mse: float
    mae: float
    delta_pct: float
    ben_pct: float
    fb_pct: float
    pinball: float | None = None
    coverage: float | None = None
    width: float | None = None

    LOSS_FIELDS = ("mse", "mae", "pinball")

    def as_dict(self, paper_scale: bool = False) -> dict:
        out = {
            "method": self.method, "horizon": self.horizon,
            "mse": self.mse, "mae": self.mae, "pinball": self.pinball,
            "coverage": self.coverage, "width": self.width,
            "delta_pct": self.delta_pct, "ben_pct": self.ben_pct,
            "fb_pct": self.fb_pct,
        }
        if paper_scale:
            for k in self.LOSS_FIELDS:
                if out[k] is not None:
                    out[k] = out[k] * 100.0
        return out


def summarize_method(method: str, horizon: int,
                     series_mse: np.ndarray, series_mae: np.ndarray,
                     reference_series_mse: np.ndarray,
                     fallback_share: float,
                     series_pinball: np.ndarray | None = None,
                     coverage: float | None = None,
                     width: float | None = None) -> MetricRow:
    """Aggregate per-series TEST losses into one report row.

    delta_pct and ben_pct compare per-series MSE against the pooled reference
    model on the same windows; ties count as not benefited.
    """
    mu = float(np.mean(series_mse))
    mu_ref = float(np.mean(reference_series_mse))
    delta = 100.0 * (mu_ref - mu) / mu_ref if mu_ref != 0 else 0.0
    ben = 100.0 * float(np.mean(series_mse < reference_series_mse))
    return MetricRow(
        method=method, horizon=horizon,
        mse=mu, mae=float(np.mean(series_mae)),
        pinball=None if series_pinball is None else float(np.mean(series_pinball)),
        coverage=coverage, width=width,
        delta_pct=delta, ben_pct=ben, fb_pct=100.0 * fallback_share,
    )


def test_metrics(method: str, horizon: int, preds: np.ndarray,
                 targets: np.ndarray, ref_preds: np.ndarray,
                 fallback_share: float, quantile_fan: np.ndarray | None = None,
                 levels=None, bounds=None) -> MetricRow:
    """One TEST report row from aligned per-series prediction streams.

    ``preds``, ``targets``, ``ref_preds`` are (N, n_windows, P); ``preds``
    holds the point forecast (the median path in quantile mode) and
    ``ref_preds`` the pooled reference on the same windows. Optionally,
    ``quantile_fan`` (N, n_windows, Q, P) with its ``levels`` adds the mean
    pinball column, and ``bounds`` = (lower, upper) arrays shaped like
    ``targets`` add coverage and width.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    ref_preds = np.asarray(ref_preds, dtype=np.float64)
    if not (preds.shape == targets.shape == ref_preds.shape) or preds.ndim != 3:
        raise ValueError("length mismatch between prediction/target streams")
    err = preds - targets
    series_mse = (err ** 2).mean(axis=(1, 2))
    series_mae = np.abs(err).mean(axis=(1, 2))
    ref_err = ref_preds - targets
    ref_mse = (ref_err ** 2).mean(axis=(1, 2))
    series_pin = None
    if quantile_fan is not None:
        fan = np.asarray(quantile_fan, dtype=np.float64)
        if fan.shape[:2] != targets.shape[:2] or fan.shape[3] != targets.shape[2]:
            raise ValueError("length mismatch in quantile fan")
        q = np.asarray(levels, dtype=np.float64).reshape(1, 1, -1, 1)
        series_pin = pinball_elem(fan, targets[:, :, None, :], q).mean(axis=(1, 2, 3))
    coverage = width = None
    if bounds is not None:
        lower, upper = (np.asarray(b, dtype=np.float64) for b in bounds)
        if lower.shape != targets.shape or upper.shape != targets.shape:
            raise ValueError("length mismatch in interval bounds")
        coverage, width = interval_stats(targets, lower, upper)
    return summarize_method(method, horizon, series_mse, series_mae, ref_mse,
                            fallback_share, series_pin, coverage, width)


class MetricTable:
    """Ordered collection of report rows with JSON / CSV serialization."""

    COLUMNS = ("method", "horizon", "mse", "mae", "pinball", "coverage",
               "width", "delta_pct", "ben_pct", "fb_pct")

    def __init__(self, rows: list[MetricRow] | None = None):
        self.rows: list[MetricRow] = list(rows or [])

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def row(self, method: str, horizon: int) -> MetricRow:
        for r in self.rows:
            if r.method == method and r.horizon == horizon:
                return r
        raise KeyError((method, horizon))

    def to_records(self, paper_scale: bool = False) -> list[dict]:
        return [r.as_dict(paper_scale) for r in self.rows]

    def to_csv(self, path: str, paper_scale: bool = False) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for rec in self.to_records(paper_scale):
                writer.writerow({k: ("" if rec[k] is None else rec[k])
                                 for k in self.COLUMNS})

    def format(self, paper_scale: bool = False) -> str:
        recs = self.to_records(paper_scale)
        lines = [" ".join(f"{c:>14}" for c in self.COLUMNS)]
        for rec in recs:
            cells = []
            for c in self.COLUMNS:
                v = rec[c]
                if v is None:
                    cells.append(f"{'-':>14}")
                elif isinstance(v, float):
                    cells.append(f"{v:>14.6f}")
                else:
                    cells.append(f"{str(v):>14}")
            lines.append(" ".join(cells))
        return "\n".join(lines)
