"""Classification metrics and map rendering.

Overall accuracy is trace/total; average accuracy is the mean of the
per-class accuracies over classes that actually appear in the truth;
kappa is (p_o - p_e) / (1 - p_e) with p_e the chance agreement from the
marginals. Maps are emitted as plain-text PPM (P3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .jsonio import Fixed6


class RenderError(ValueError):
    """A grid value has no palette entry."""


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are true classes 1..K, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(c < 0):
            raise ValueError("counts must be nonnegative")
        self.counts = c

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(truth, pred, num_classes: int | None = None) -> ConfusionMatrix:
    """Count (true, predicted) pairs; classes must lie in 1..K."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.size == 0:
        raise ValueError("cannot build a confusion matrix from empty inputs")
    if truth.shape != pred.shape or truth.ndim != 1:
        raise ValueError("truth and prediction sequences must match in length")
    k = int(max(truth.max(), pred.max())) if num_classes is None else num_classes
    if truth.min() < 1 or pred.min() < 1 or truth.max() > k or pred.max() > k:
        raise ValueError(f"classes must lie in [1, {k}]")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (truth - 1, pred - 1), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricReport:
    oa: float
    aa: float
    kappa: float
    per_class: list[float | None]

    def as_payload(self) -> dict:
        """JSON-ready dict; floats render with fixed six decimals."""
        return {
            "oa": Fixed6(self.oa),
            "aa": Fixed6(self.aa),
            "kappa": Fixed6(self.kappa),
            "per_class": [None if a is None else Fixed6(a) for a in self.per_class],
        }


def compute_metrics(cm: ConfusionMatrix) -> MetricReport:
    """OA, AA, kappa, and per-class accuracies from a confusion matrix.

    Classes absent from the truth (empty rows) are excluded from AA and
    reported as None. If chance agreement p_e reaches 1, kappa is 1 for a
    perfect classifier and 0 otherwise.
    """
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    oa = float(diag.sum() / total)
    per_class: list[float | None] = [
        float(diag[k] / row[k]) if row[k] > 0 else None
        for k in range(cm.num_classes)
    ]
    defined = [a for a in per_class if a is not None]
    aa = float(np.mean(defined))
    p_e = float(np.dot(row, col) / (total * total))
    if p_e >= 1.0:
        kappa = 1.0 if oa >= 1.0 else 0.0
    else:
        kappa = (oa - p_e) / (1.0 - p_e)
    return MetricReport(oa=oa, aa=aa, kappa=float(kappa), per_class=per_class)


def default_palette(num_classes: int) -> list[tuple[int, int, int]]:
    """Black for unlabeled, then evenly spaced hues for classes 1..K."""
    palette = [(0, 0, 0)]
    for k in range(num_classes):
        hue = (k / max(num_classes, 1)) * 6.0
        sector = int(hue) % 6
        frac = hue - int(hue)
        v, p, q, t = 255, 40, int(255 - (255 - 40) * frac), int(40 + (255 - 40) * frac)
        rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][sector]
        palette.append(rgb)
    return palette


def render_map(grid: np.ndarray, palette: list[tuple[int, int, int]] | None = None) -> str:
    """Plain-text PPM (P3) for a class grid (palette given) or an
    uncertainty grid in [0, 1] (palette None, 256-step grayscale)."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError("grid must be 2-D")
    h, w = grid.shape
    lines = ["P3", f"{w} {h}", "255"]
    if palette is not None:
        values = grid.astype(np.int64)
        if values.min() < 0 or values.max() >= len(palette):
            raise RenderError(
                f"class {int(values.max() if values.max() >= len(palette) else values.min())} "
                f"outside palette of size {len(palette)}")
        for r in range(h):
            lines.append(" ".join("%d %d %d" % palette[v] for v in values[r]))
    else:
        gray = np.clip(np.floor(grid.astype(np.float64) * 255.0), 0, 255).astype(np.int64)
        for r in range(h):
            lines.append(" ".join("%d %d %d" % (g, g, g) for g in gray[r]))
    return "\n".join(lines)


def parse_ppm(text: str) -> tuple[int, int, np.ndarray]:
    """Inverse of render_map: (width, height, H x W x 3 uint8 pixels)."""
    tokens = text.split()
    if not tokens or tokens[0] != "P3":
        raise ValueError("not a P3 PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("expected 8-bit PPM")
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != w * h * 3:
        raise ValueError(f"expected {w * h * 3} samples, found {data.size}")
    if data.min() < 0 or data.max() > 255:
        raise ValueError("sample out of range")
    return w, h, data.reshape(h, w, 3)
