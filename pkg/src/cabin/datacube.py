"""Hyperspectral cube handling: text I/O, synthetic scenes, PCA, patches, splits.

File formats
------------
Cube files are UTF-8 text with LF endings. Line 1 is ``H W B`` (ASCII
decimals); the following ``H*W`` lines each hold ``B`` floats, row-major
by (row, col). Label files start with ``H W K``; the following ``H``
lines hold ``W`` integers in [0, K], where 0 means unlabeled.

Pixel ids used throughout the package are flat row-major indices,
``id = row * width + col``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64

_TAG_SITES = 0x51735
_TAG_NOISE = 0x401475
_JACOBI_MAX_SWEEPS = 100


class CubeFormatError(ValueError):
    """Malformed cube or label file."""


class SplitError(ValueError):
    """Dataset split constraints cannot be met."""


class NumericError(ArithmeticError):
    """A numeric routine failed to produce finite, converged output."""


@dataclass
class HyperCube:
    """H x W x B reflectance image stored as float64."""

    height: int
    width: int
    bands: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        expected = (self.height, self.width, self.bands)
        if vals.size != self.height * self.width * self.bands:
            raise ValueError(f"values size {vals.size} does not match {expected}")
        self.values = vals.reshape(expected)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cube values must be finite")

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    def pixel(self, row: int, col: int) -> np.ndarray:
        return self.values[row, col]


@dataclass
class LabelMap:
    """Integer label grid; 0 marks unlabeled pixels, classes run 1..K."""

    height: int
    width: int
    num_classes: int
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        if lab.size != self.height * self.width:
            raise ValueError("label grid size mismatch")
        self.labels = lab.reshape(self.height, self.width)
        if self.labels.min() < 0 or self.labels.max() > self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes}]")

    @property
    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)


@dataclass
class Patch:
    """A flattened S x S x B window around a center pixel."""

    center: tuple[int, int]
    window: np.ndarray
    label: int | None = None


@dataclass
class SplitSpec:
    """Per-class draw counts; the small-class rule kicks in when a class
    population is below train + val + small_class_test."""

    train_per_class: int = 20
    val_per_class: int = 20
    small_class_test: int = 5
    small_class_val: int = 2
    seed: int = 0

    def __post_init__(self):
        counts = (self.train_per_class, self.val_per_class,
                  self.small_class_test, self.small_class_val)
        if any(c < 0 for c in counts):
            raise ValueError("split counts must be nonnegative")


@dataclass
class DatasetSplit:
    train_ids: list[int]
    val_ids: list[int]
    test_ids: list[int]
    pool_ids: list[int] = field(default_factory=list)


def load_cube(path) -> HyperCube:
    """Parse a cube text file; any shape or value problem raises CubeFormatError."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CubeFormatError("empty cube file")
    header = lines[0].split()
    if len(header) != 3:
        raise CubeFormatError(f"cube header must be 'H W B', got {lines[0]!r}")
    try:
        h, w, b = (int(tok) for tok in header)
    except ValueError as exc:
        raise CubeFormatError(f"non-integer cube header: {lines[0]!r}") from exc
    if h <= 0 or w <= 0 or b <= 0:
        raise CubeFormatError("cube dimensions must be positive")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != h * w:
        raise CubeFormatError(f"expected {h * w} data lines, found {len(body)}")
    values = np.empty((h * w, b), dtype=np.float64)
    for i, line in enumerate(body):
        toks = line.split()
        if len(toks) != b:
            raise CubeFormatError(f"line {i + 2}: expected {b} values, got {len(toks)}")
        try:
            values[i] = [float(t) for t in toks]
        except ValueError as exc:
            raise CubeFormatError(f"line {i + 2}: unparseable float") from exc
    if not np.all(np.isfinite(values)):
        raise CubeFormatError("cube contains non-finite values")
    return HyperCube(h, w, b, values.reshape(h, w, b))


def save_cube(cube: HyperCube, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{cube.height} {cube.width} {cube.bands}\n")
        flat = cube.values.reshape(cube.num_pixels, cube.bands)
        for row in flat:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_labels(path) -> LabelMap:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CubeFormatError("empty label file")
    header = lines[0].split()
    if len(header) != 3:
        raise CubeFormatError(f"label header must be 'H W K', got {lines[0]!r}")
    try:
        h, w, k = (int(tok) for tok in header)
    except ValueError as exc:
        raise CubeFormatError(f"non-integer label header: {lines[0]!r}") from exc
    if h <= 0 or w <= 0 or k < 1:
        raise CubeFormatError("label dimensions must be positive")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != h:
        raise CubeFormatError(f"expected {h} label rows, found {len(body)}")
    grid = np.empty((h, w), dtype=np.int64)
    for i, line in enumerate(body):
        toks = line.split()
        if len(toks) != w:
            raise CubeFormatError(f"row {i + 2}: expected {w} labels, got {len(toks)}")
        try:
            grid[i] = [int(t) for t in toks]
        except ValueError as exc:
            raise CubeFormatError(f"row {i + 2}: unparseable label") from exc
    if grid.min() < 0 or grid.max() > k:
        raise CubeFormatError(f"labels must lie in [0, {k}]")
    return LabelMap(h, w, k, grid)


def save_labels(labels: LabelMap, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{labels.height} {labels.width} {labels.num_classes}\n")
        for row in labels.labels:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def class_templates(bands: int, num_classes: int) -> np.ndarray:
    """Orthogonal per-class mean spectra: half-sine bumps on disjoint band
    segments, so distinct classes have exactly orthogonal templates."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if bands < num_classes:
        raise ValueError("need at least one band per class")
    templates = np.zeros((num_classes, bands), dtype=np.float64)
    bounds = [round(k * bands / num_classes) for k in range(num_classes + 1)]
    for k in range(num_classes):
        lo, hi = bounds[k], bounds[k + 1]
        seg = hi - lo
        templates[k, lo:hi] = np.sin(np.pi * (np.arange(seg) + 0.5) / seg)
    return templates


def generate_synthetic(height: int, width: int, bands: int, num_classes: int,
                       noise_sigma: float, seed: int) -> tuple[HyperCube, LabelMap]:
    """Voronoi scene: K seeded sites partition the grid into contiguous
    regions; each region gets its class template plus N(0, sigma^2) noise.

    Site draws are retried until every class covers at least 1% of the
    pixels, which mirrors the spatial contiguity of real scenes.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if bands < num_classes:
        raise ValueError("bands must be >= num_classes")
    if num_classes > height * width:
        raise ValueError("more classes than pixels")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")

    n = height * width
    min_share = max(1, -(-n // 100))  # ceil(1% of pixels)
    if num_classes * min_share > n:
        raise ValueError("cannot give every class 1% of the pixels")

    rows, cols = np.divmod(np.arange(n), width)
    site_rng = SplitMix64.derive(seed, _TAG_SITES)
    assign = None
    for _ in range(1000):
        sites = site_rng.sample(range(n), num_classes)
        sr = rows[sites][None, :]
        sc = cols[sites][None, :]
        d2 = (rows[:, None] - sr) ** 2 + (cols[:, None] - sc) ** 2
        cand = np.argmin(d2, axis=1)  # ties resolve to the lowest site index
        counts = np.bincount(cand, minlength=num_classes)
        if counts.min() >= min_share:
            assign = cand
            break
    if assign is None:
        raise ValueError("could not place classes with >= 1% coverage each")

    templates = class_templates(bands, num_classes)
    values = templates[assign]
    if noise_sigma > 0:
        noise_rng = SplitMix64.derive(seed, _TAG_NOISE)
        values = values + noise_sigma * noise_rng.normals((n, bands))
    cube = HyperCube(height, width, bands, values.reshape(height, width, bands))
    labels = LabelMap(height, width, num_classes, (assign + 1).reshape(height, width))
    return cube, labels


def _jacobi_eigh(matrix: np.ndarray, off_tol: float = 1e-10):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps rotations over all (p, q) pairs until the off-diagonal
    Frobenius norm drops below off_tol. Adequate for band counts up to a
    few hundred; raises NumericError if the sweep budget is exhausted.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = np.sqrt(max(np.sum(a ** 2) - np.sum(np.diag(a) ** 2), 0.0))
        if off < off_tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    else:
        raise NumericError("Jacobi eigensolver failed to converge")
    return np.diag(a).copy(), v


def pca_reduce(cube: HyperCube, components: int) -> HyperCube:
    """Project each pixel spectrum onto the top principal band directions.

    The covariance is taken over all pixels (mean-centered, divided by
    N - 1); eigenpairs come from the cyclic Jacobi solver, ordered by
    descending eigenvalue, and each eigenvector's sign is fixed so its
    largest-magnitude entry is positive.
    """
    if components < 1 or components > cube.bands:
        raise ValueError(f"components must be in [1, {cube.bands}]")
    if cube.num_pixels < components:
        raise ValueError("need at least as many pixels as components")
    x = cube.values.reshape(cube.num_pixels, cube.bands)
    centered = x - x.mean(axis=0)
    denom = max(cube.num_pixels - 1, 1)
    cov = centered.T @ centered / denom
    eigvals, eigvecs = _jacobi_eigh(cov)
    order = np.argsort(-eigvals, kind="stable")
    eigvecs = eigvecs[:, order]
    for j in range(eigvecs.shape[1]):
        col = eigvecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            eigvecs[:, j] = -col
    proj = centered @ eigvecs[:, :components]
    return HyperCube(cube.height, cube.width, components,
                     proj.reshape(cube.height, cube.width, components))


def pca_eigenvalues(cube: HyperCube) -> np.ndarray:
    """All band-covariance eigenvalues, descending; shares pca_reduce's solver."""
    x = cube.values.reshape(cube.num_pixels, cube.bands)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(cube.num_pixels - 1, 1)
    eigvals, _ = _jacobi_eigh(cov)
    return np.sort(eigvals)[::-1]


def mirror_index(i: int, n: int) -> int:
    """Reflect an out-of-range index back into [0, n), edge not repeated."""
    if n == 1:
        return 0
    period = 2 * n - 2
    i = abs(i) % period
    return i if i < n else period - i


def patch_window(cube: HyperCube, center: tuple[int, int], size: int) -> np.ndarray:
    """S x S x B window around center with mirror padding at borders."""
    if size % 2 == 0 or size < 1:
        raise ValueError("window size must be odd and positive")
    r0, c0 = center
    if not (0 <= r0 < cube.height and 0 <= c0 < cube.width):
        raise ValueError(f"center {center} outside {cube.height}x{cube.width} image")
    half = size // 2
    rows = [mirror_index(r0 + dr, cube.height) for dr in range(-half, half + 1)]
    cols = [mirror_index(c0 + dc, cube.width) for dc in range(-half, half + 1)]
    return cube.values[np.ix_(rows, cols)].copy()


def extract_patch(cube: HyperCube, center: tuple[int, int], size: int,
                  label: int | None = None) -> Patch:
    """Flattened mirror-padded window; flattening order is (row, col, band)."""
    window = patch_window(cube, center, size)
    return Patch(center=center, window=window.reshape(-1), label=label)


def extract_all_patches(cube: HyperCube, size: int) -> np.ndarray:
    """(H*W, S*S*B) matrix of flattened patches for every pixel, in id order.

    Vectorized equivalent of calling extract_patch per pixel.
    """
    if size % 2 == 0 or size < 1:
        raise ValueError("window size must be odd and positive")
    if size == 1:
        return cube.values.reshape(cube.num_pixels, cube.bands).copy()
    half = size // 2
    row_map = np.array([mirror_index(i, cube.height) for i in range(-half, cube.height + half)])
    col_map = np.array([mirror_index(i, cube.width) for i in range(-half, cube.width + half)])
    padded = cube.values[np.ix_(row_map, col_map)]
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(0, 1))
    # windows: (H, W, B, S, S) -> per-patch (S, S, B) order
    patches = windows.transpose(0, 1, 3, 4, 2)
    return patches.reshape(cube.num_pixels, size * size * cube.bands).copy()


def make_split(labels: LabelMap, spec: SplitSpec) -> DatasetSplit:
    """Per-class seeded split into train/val/test; pool starts as the train set.

    Classes with at least train + val + small_class_test members get the
    standard draw (train, then val, remainder test). Smaller classes use
    the small-class rule: small_class_test test, small_class_val val,
    remainder train.
    """
    flat = labels.flat
    train: list[int] = []
    val: list[int] = []
    test: list[int] = []
    for k in range(1, labels.num_classes + 1):
        ids = np.flatnonzero(flat == k)
        if ids.size == 0:
            raise SplitError(f"class {k} has no labeled pixels")
        rng = SplitMix64.derive(spec.seed, k)
        shuffled = rng.sample([int(i) for i in ids], ids.size)
        full_need = spec.train_per_class + spec.val_per_class + spec.small_class_test
        if ids.size >= full_need:
            train.extend(shuffled[:spec.train_per_class])
            val.extend(shuffled[spec.train_per_class:spec.train_per_class + spec.val_per_class])
            test.extend(shuffled[spec.train_per_class + spec.val_per_class:])
        else:
            small_need = spec.small_class_test + spec.small_class_val
            if ids.size < small_need:
                raise SplitError(
                    f"class {k} has {ids.size} pixels, fewer than the "
                    f"small-class minimum {small_need}")
            test.extend(shuffled[:spec.small_class_test])
            val.extend(shuffled[spec.small_class_test:small_need])
            train.extend(shuffled[small_need:])
    return DatasetSplit(train_ids=train, val_ids=val, test_ids=test, pool_ids=list(train))
