"""Uncertainty-guided dual sampling: histogram thresholding of pool
uncertainties, diverse query selection by k-means++ clustering of
embeddings, and uncertainty-scaled Gaussian feature perturbation.

The threshold scan works on an N-bin histogram h of the pool's averaged
uncertainties. With first differences dh[n] = h[n+1] - h[n], the
threshold is the right edge of the first bin n where dh[n] < delta and
the difference has just turned down (dh[n] < dh[n-1]). If no bin
qualifies, the 75th percentile of the uncertainties is used instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64


class DegenerateDistributionError(ValueError):
    """All uncertainties identical; no histogram threshold exists."""


class SelectionError(ValueError):
    """Query selection asked to pick from an empty candidate set."""


@dataclass
class LedgerEntry:
    sample_id: int
    u_hat: float
    embedding: np.ndarray


@dataclass
class UncertaintyLedger:
    """Pool records of (id, TTA-averaged uncertainty, embedding)."""

    entries: list[LedgerEntry]

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("ledger ids must be unique")
        for e in self.entries:
            if not np.isfinite(e.u_hat) or not 0.0 <= e.u_hat <= 1.0:
                raise ValueError(f"uncertainty {e.u_hat} for id {e.sample_id} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.sample_id for e in self.entries]

    @property
    def uncertainties(self) -> np.ndarray:
        return np.array([e.u_hat for e in self.entries], dtype=np.float64)

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])


@dataclass
class ThresholdResult:
    t_u: float
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    fallback_used: bool


def adaptive_threshold(ledger: UncertaintyLedger, bins: int = 32,
                       delta: float = 0.0) -> ThresholdResult:
    """Histogram-scan threshold over the ledger's uncertainties."""
    if bins < 3:
        raise ValueError("need at least 3 bins")
    us = ledger.uncertainties
    if us.size < 2 or np.unique(us).size < 2:
        raise DegenerateDistributionError("need at least 2 distinct uncertainty values")
    lo, hi = float(us.min()), float(us.max())
    counts, edges = np.histogram(us, bins=bins, range=(lo, hi))
    dh = np.diff(counts.astype(np.float64))
    for n in range(1, bins - 1):
        if dh[n] < delta and dh[n] - dh[n - 1] < 0:
            return ThresholdResult(t_u=float(edges[n + 1]), bin_edges=edges,
                                   bin_counts=counts, fallback_used=False)
    return ThresholdResult(t_u=float(np.percentile(us, 75)), bin_edges=edges,
                           bin_counts=counts, fallback_used=True)


def partition_pool(ledger: UncertaintyLedger, t_u: float) -> tuple[list[int], list[int]]:
    """(high-uncertainty ids, confident ids): u >= t_u goes high."""
    if not np.isfinite(t_u):
        raise ValueError("threshold must be finite")
    high = [e.sample_id for e in ledger.entries if e.u_hat >= t_u]
    low = [e.sample_id for e in ledger.entries if e.u_hat < t_u]
    return high, low


@dataclass
class QuerySelection:
    centroids: np.ndarray
    selected_ids: list[int]
    candidate_ids: list[int] = field(default_factory=list)
    assignments: np.ndarray | None = None


def _kmeans_once(points: np.ndarray, k: int, rng: SplitMix64, max_iter: int):
    n = points.shape[0]
    # k-means++ seeding
    centers = [points[rng.randint(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.randint(n) if total <= 0 else rng.choice_weighted(d2)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - centers[-1]) ** 2, axis=1))
    centers = np.array(centers)

    assign = None
    for _ in range(max_iter):
        dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dists, axis=1)
        # repair empty clusters by stealing the farthest point from a
        # cluster that can spare one
        sizes = np.bincount(new_assign, minlength=k)
        for j in np.flatnonzero(sizes == 0):
            movable = sizes[new_assign] >= 2
            if not movable.any():
                break
            own = dists[np.arange(n), new_assign]
            own = np.where(movable, own, -np.inf)
            steal = int(np.argmax(own))
            sizes[new_assign[steal]] -= 1
            new_assign[steal] = j
            sizes[j] += 1
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    inertia = float(np.sum((points - centers[assign]) ** 2))
    return centers, assign, inertia


def kmeans(points: np.ndarray, k: int, seed: int, n_init: int = 10,
           max_iter: int = 100):
    """k-means++ seeding plus Lloyd iterations, best of n_init restarts."""
    if k < 1 or k > points.shape[0]:
        raise ValueError("k must lie in [1, n_points]")
    best = None
    for trial in range(n_init):
        rng = SplitMix64.derive(seed, 0x4B4D, trial)
        result = _kmeans_once(points, k, rng, max_iter)
        if best is None or result[2] < best[2]:
            best = result
    return best


def drqs_select(candidate_ids: list[int], embeddings: np.ndarray, m: int,
                seed: int) -> QuerySelection:
    """Cluster candidate embeddings into m groups and pick, per group, the
    member nearest its centroid (ties broken by smallest sample id)."""
    if m < 1:
        raise ValueError("query budget must be >= 1")
    if len(candidate_ids) == 0:
        raise SelectionError("no candidates to select from")
    points = np.asarray(embeddings, dtype=np.float64)
    if points.shape[0] != len(candidate_ids):
        raise ValueError("embeddings and ids length mismatch")
    if len(candidate_ids) <= m:
        return QuerySelection(centroids=points.copy(),
                              selected_ids=list(candidate_ids),
                              candidate_ids=list(candidate_ids),
                              assignments=np.arange(len(candidate_ids)))
    centers, assign, _ = kmeans(points, m, seed)
    selected = []
    for j in range(m):
        members = np.flatnonzero(assign == j)
        dists = np.sum((points[members] - centers[j]) ** 2, axis=1)
        best_i, best_d = None, None
        for local, dist in zip(members, dists):
            sid = candidate_ids[local]
            if best_d is None or dist < best_d or (dist == best_d and sid < best_i):
                best_i, best_d = sid, dist
        selected.append(best_i)
    return QuerySelection(centroids=centers, selected_ids=selected,
                          candidate_ids=list(candidate_ids), assignments=assign)


@dataclass
class GfpConfig:
    """Gaussian feature perturbation: noise scale grows linearly with the
    sample's normalized uncertainty, from lam_min up to lam_max."""

    lam_min: float = 0.05
    lam_max: float = 0.5
    mix_weight: float = 0.5
    copies_per_sample: int = 4
    clamp_lo: np.ndarray | None = None
    clamp_hi: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam_min <= self.lam_max:
            raise ValueError("need 0 <= lam_min <= lam_max")
        if not 0.0 <= self.mix_weight <= 1.0:
            raise ValueError("mix_weight must lie in [0, 1]")
        if self.copies_per_sample < 0:
            raise ValueError("copies_per_sample must be nonnegative")


@dataclass
class SelectedSample:
    """One annotated sample entering augmentation: min-max normalized
    uncertainty, input feature vector, and its revealed label."""

    sample_id: int
    u_norm: float
    features: np.ndarray
    label: int


@dataclass
class GfpStats:
    """Per-feature noise statistics: variance over the whole annotated set
    and, per sample, variance over its selection cluster."""

    global_var: np.ndarray
    local_var: dict[int, np.ndarray]


@dataclass
class AugmentedSample:
    source_id: int
    features: np.ndarray
    label: int
    scale: float


def perturbation_scale(u_norm: float, lam_min: float, lam_max: float) -> float:
    """Linear map of normalized uncertainty onto [lam_min, lam_max]."""
    if not 0.0 <= u_norm <= 1.0:
        raise ValueError("normalized uncertainty must lie in [0, 1]")
    return lam_min + (lam_max - lam_min) * u_norm


def gfp_augment(selected: list[SelectedSample], stats: GfpStats,
                cfg: GfpConfig) -> list[AugmentedSample]:
    """Perturbed copies of each selected sample, clamped per feature to the
    pool's observed dynamic range. Noise is N(0, diag(sigma^2)) with
    sigma^2 = w * local + (1 - w) * global variance."""
    if cfg.clamp_lo is None or cfg.clamp_hi is None:
        raise ValueError("clamp bounds must be set before augmentation")
    out: list[AugmentedSample] = []
    if cfg.copies_per_sample == 0:
        return out
    w = cfg.mix_weight
    for rec in selected:
        lam = perturbation_scale(rec.u_norm, cfg.lam_min, cfg.lam_max)
        local = stats.local_var.get(rec.sample_id)
        if local is None:
            local = stats.global_var
        sigma = np.sqrt(w * local + (1.0 - w) * stats.global_var)
        rng = SplitMix64.derive(cfg.seed, 0x6F9, rec.sample_id)
        for _ in range(cfg.copies_per_sample):
            eta = rng.normals(rec.features.shape[0]) * sigma
            x = np.clip(rec.features + lam * eta, cfg.clamp_lo, cfg.clamp_hi)
            out.append(AugmentedSample(source_id=rec.sample_id, features=x,
                                       label=rec.label, scale=lam))
    return out


def normalize_uncertainties(us: np.ndarray) -> np.ndarray:
    """Min-max normalization over the pool; constant input maps to zero."""
    us = np.asarray(us, dtype=np.float64)
    span = us.max() - us.min()
    if span <= 0:
        return np.zeros_like(us)
    return (us - us.min()) / span
