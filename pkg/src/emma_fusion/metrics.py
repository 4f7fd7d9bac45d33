"""Fusion quality metrics.

Images come in as float arrays in [0, 1] and are rescaled to the 0-255
range before measuring, so magnitudes read like the usual published tables.
Correlations against a zero-variance signal are defined as 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ShapeError

SCALE = 255.0
VIF_SIGMA_NSQ = 2.0
VIF_SCALES = 4
TABLE_COLUMNS = ("en", "sd", "sf", "ag", "scd", "vif")


def _gray(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"metrics expect a single-channel 2-D image, got shape {x.shape}")
    return x


def _same(*xs):
    if len({x.shape for x in xs}) != 1:
        raise ShapeError(f"shape mismatch: {[x.shape for x in xs]}")


def en(f) -> float:
    """Entropy in bits of the 256-bin histogram of the 8-bit quantized image."""
    q = np.clip(np.floor(_gray(f) * SCALE + 0.5), 0, 255).astype(np.int64)
    p = np.bincount(q.ravel(), minlength=256) / q.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def sd(f) -> float:
    return float(np.std(_gray(f) * SCALE))


def sf(f) -> float:
    x = _gray(f) * SCALE
    rf2 = (np.diff(x, axis=1) ** 2).sum() / x.size
    cf2 = (np.diff(x, axis=0) ** 2).sum() / x.size
    return float(np.sqrt(rf2 + cf2))


def ag(f) -> float:
    x = _gray(f) * SCALE
    dx = x[:-1, 1:] - x[:-1, :-1]
    dy = x[1:, :-1] - x[:-1, :-1]
    if dx.size == 0:
        return 0.0
    return float(np.mean(np.sqrt((dx**2 + dy**2) / 2)))


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if denom == 0.0:
        return 0.0
    return float((a * b).sum() / denom)


def scd(f, i, v) -> float:
    f, i, v = _gray(f), _gray(i), _gray(v)
    _same(f, i, v)
    return _corr(f - i, v) + _corr(f - v, i)


def truth_correlation(f, truth) -> float:
    f, truth = _gray(f), _gray(truth)
    _same(f, truth)
    return _corr(f, truth)


def gaussian_window(n: int, sigma: float) -> np.ndarray:
    half = (n - 1) / 2
    y, x = np.mgrid[-half : half + 1, -half : half + 1]
    w = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    w[w < np.finfo(w.dtype).eps * w.max()] = 0
    return w / w.sum()


def _filter(x, win):
    return ndimage.correlate(x, win, mode="reflect")


def _vif_single(ref: np.ndarray, dist: np.ndarray) -> float:
    num = den = 0.0
    for k in range(VIF_SCALES):
        n = 2 ** (VIF_SCALES - k) + 1
        win = gaussian_window(n, n / 5.0)
        if k > 0:
            ref = _filter(ref, win)[::2, ::2]
            dist = _filter(dist, win)[::2, ::2]
        mu1, mu2 = _filter(ref, win), _filter(dist, win)
        s1 = np.maximum(_filter(ref * ref, win) - mu1 * mu1, 0)
        s2 = np.maximum(_filter(dist * dist, win) - mu2 * mu2, 0)
        s12 = _filter(ref * dist, win) - mu1 * mu2

        g = s12 / (s1 + 1e-10)
        sv = s2 - g * s12
        flat_ref = s1 < 1e-10
        g[flat_ref] = 0
        sv[flat_ref] = s2[flat_ref]
        s1[flat_ref] = 0
        flat_dist = s2 < 1e-10
        g[flat_dist] = 0
        sv[flat_dist] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv = np.maximum(sv, 1e-10)

        num += np.log10(1 + g * g * s1 / (sv + VIF_SIGMA_NSQ)).sum()
        den += np.log10(1 + s1 / VIF_SIGMA_NSQ).sum()
    return float(num / den) if den > 0 else 0.0


def vif(f, i, v) -> float:
    """Multi-scale pixel-domain VIF of ``f`` against each source, averaged.

    Four scales with Gaussian windows of 17, 9, 5 and 3 taps (sigma = taps / 5),
    filtered at full size with mirror borders so that small images work.
    """
    f, i, v = _gray(f), _gray(i), _gray(v)
    _same(f, i, v)
    return 0.5 * (_vif_single(i * SCALE, f * SCALE) + _vif_single(v * SCALE, f * SCALE))


@dataclass
class MetricReport:
    en: float
    sd: float
    sf: float
    ag: float
    scd: float
    vif: float
    equivariance_error: Optional[float] = None
    truth_correlation: Optional[float] = None

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value is not None and not math.isfinite(value):
                raise ValueError(f"metric {name} is not finite: {value}")

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=False)

    def table(self, label: str = "fused") -> str:
        cols = [c for c in (*TABLE_COLUMNS, "truth_correlation", "equivariance_error")
                if getattr(self, c) is not None]
        heads = ["image", *(c.upper() if c in TABLE_COLUMNS else c for c in cols)]
        cells = [label, *(f"{getattr(self, c):.4f}" for c in cols)]
        widths = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        return "\n".join("  ".join(s.rjust(w) for s, w in zip(row, widths)) for row in (heads, cells)) + "\n"


def evaluate(f, i, v, truth=None, equivariance_error: float | None = None) -> MetricReport:
    return MetricReport(
        en=en(f), sd=sd(f), sf=sf(f), ag=ag(f), scd=scd(f, i, v), vif=vif(f, i, v),
        equivariance_error=equivariance_error,
        truth_correlation=None if truth is None else truth_correlation(f, truth),
    )
