"""Evaluation metrics: MSE, scale-invariant MSE, local MSE, DSSIM and WHDR, plus the report type."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

LMSE_WINDOW = 20
SSIM_SIGMA = 1.5
SSIM_SIZE = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(j, jhat) -> tuple[np.ndarray, np.ndarray]:
    j = np.asarray(j, dtype=np.float64)
    jhat = np.asarray(jhat, dtype=np.float64)
    if j.shape != jhat.shape:
        raise ValueError(f"shape mismatch {j.shape} vs {jhat.shape}")
    return j, jhat


def _weights(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64) > 0, shape)
    return m.astype(np.float64)


def mse(j, jhat, mask=None) -> float:
    j, jhat = _pair(j, jhat)
    w = _weights(mask, j.shape)
    n = w.sum()
    if n == 0:
        raise ValueError("mask selects no pixels")
    return float((w * (j - jhat) ** 2).sum() / n)


def smse_alpha(j, jhat, mask=None) -> float:
    """Least-squares scale for ``j``; 0 when ``j`` vanishes under the mask."""
    j, jhat = _pair(j, jhat)
    w = _weights(mask, j.shape)
    den = (w * j * j).sum()
    return float((w * j * jhat).sum() / den) if den > 0 else 0.0


def smse(j, jhat, mask=None) -> float:
    j, jhat = _pair(j, jhat)
    return mse(smse_alpha(j, jhat, mask) * j, jhat, mask)


def _window_starts(size: int, window: int) -> list[int]:
    if size <= window:
        return [0]
    return list(range(0, size - window + 1, window // 2))


def lmse_parts(j, jhat, window: int = LMSE_WINDOW) -> tuple[float, int]:
    """(sum of locally scaled squared errors over all windows, number of entries covered)."""
    j, jhat = _pair(j, jhat)
    if j.ndim == 2:
        j, jhat = j[None], jhat[None]
    _, h, w = j.shape
    sse, count = 0.0, 0
    for y in _window_starts(h, window):
        for x in _window_starts(w, window):
            a = j[:, y:y + window, x:x + window]
            b = jhat[:, y:y + window, x:x + window]
            den = (a * a).sum()
            alpha = (a * b).sum() / den if den > 0 else 0.0
            sse += float(((alpha * a - b) ** 2).sum())
            count += a.size
    return sse, count


def lmse(j, jhat, window: int = LMSE_WINDOW) -> float:
    """Local SMSE: windows of ``window`` pixels at half-window stride, weighted by entry count."""
    sse, count = lmse_parts(j, jhat, window)
    return sse / count


def _gaussian_kernel(size: int = SSIM_SIZE, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    out = correlate1d(correlate1d(a, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return out[r:a.shape[0] - r, r:a.shape[1] - r]


def ssim_channel(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM of one 2-D channel over the fully covered (valid) window positions."""
    side = min(x.shape)
    # maps smaller than the window use the largest odd window that fits
    k = _gaussian_kernel(SSIM_SIZE if side >= SSIM_SIZE else side - (1 - side % 2))
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def dssim(j, jhat) -> float:
    j, jhat = _pair(j, jhat)
    if j.ndim == 2:
        j, jhat = j[None], jhat[None]
    s = np.mean([ssim_channel(a, b) for a, b in zip(j, jhat)])
    return float(np.clip((1.0 - s) / 2.0, 0.0, 1.0))


@dataclass(frozen=True)
class PairJudgment:
    point1: tuple[int, int]  # (row, col)
    point2: tuple[int, int]
    darker: str  # "1", "2" or "equal"
    weight: float = 1.0

    def __post_init__(self):
        if self.darker not in ("1", "2", "equal"):
            raise ValueError(f"darker must be '1', '2' or 'equal', got {self.darker!r}")
        if not self.weight > 0:
            raise ValueError("judgment weight must be positive")


def _relation(l1: float, l2: float, delta: float) -> str:
    if l1 == 0 and l2 == 0:
        return "equal"
    if l1 == 0:
        return "1"
    if l2 == 0:
        return "2"
    if l1 / l2 < 1 / (1 + delta):
        return "1"
    if l2 / l1 < 1 / (1 + delta):
        return "2"
    return "equal"


def whdr(reflectance, judgments: list[PairJudgment], delta: float = 0.1) -> float:
    if not judgments:
        raise ValueError("whdr needs at least one judgment")
    r = np.asarray(reflectance, dtype=np.float64)
    lightness = r.mean(axis=0) if r.ndim == 3 else r
    h, w = lightness.shape
    wrong = total = 0.0
    for jd in judgments:
        for (y, x) in (jd.point1, jd.point2):
            if not (0 <= y < h and 0 <= x < w):
                raise ValueError(f"judgment point {(y, x)} outside {h}x{w} map")
        pred = _relation(lightness[jd.point1], lightness[jd.point2], delta)
        total += jd.weight
        wrong += jd.weight * (pred != jd.darker)
    return wrong / total


@dataclass
class MetricReport:
    """Per-image metric entries for each component, with their averages."""
    entries: dict[str, list[dict[str, float]]] = field(default_factory=dict)
    lmse_pooled: dict[str, list[float]] = field(default_factory=dict)  # component -> [sse, count]
    whdr: float | None = None
    skipped: int = 0
    images: list[str] = field(default_factory=list)

    COLUMNS = ("mse", "smse", "lmse", "dssim")

    @property
    def n_images(self) -> int:
        return len(self.images)

    def add(self, component: str, j, jhat, full: bool = True) -> None:
        """Record one image's metrics; ``full=False`` keeps only MSE and SMSE."""
        row = {"mse": mse(j, jhat), "smse": smse(j, jhat)}
        if full:
            row["lmse"] = lmse(j, jhat)
            row["dssim"] = dssim(j, jhat)
            sse, count = lmse_parts(j, jhat)
            pooled = self.lmse_pooled.setdefault(component, [0.0, 0])
            pooled[0] += sse
            pooled[1] += count
        self.entries.setdefault(component, []).append(row)

    def averages(self) -> dict[str, dict[str, float]]:
        out = {}
        for comp, rows in self.entries.items():
            keys = [k for k in self.COLUMNS if k in rows[0]]
            out[comp] = {k: float(np.mean([r[k] for r in rows])) for k in keys}
        return out

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "skipped": self.skipped,
            "images": self.images,
            "averages": self.averages(),
            "lmse_dataset": {c: (s / n if n else None) for c, (s, n) in self.lmse_pooled.items()},
            "whdr": self.whdr,
            "per_image": self.entries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        avg = self.averages()
        width = max([len("component")] + [len(c) for c in avg])
        lines = ["component".ljust(width) + "".join(c.upper().rjust(12) for c in self.COLUMNS)]
        for comp, vals in avg.items():
            cells = "".join((f"{vals[k]:.6f}" if k in vals else "-").rjust(12) for k in self.COLUMNS)
            lines.append(comp.ljust(width) + cells)
        lines.append(f"images: {self.n_images}  skipped: {self.skipped}")
        if self.whdr is not None:
            lines.append(f"WHDR: {self.whdr:.4f}")
        return "\n".join(lines)
