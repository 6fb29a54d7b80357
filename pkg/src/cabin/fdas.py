"""Fine-grained dynamic assignment of pseudo-labeled samples.

Per-sample Dirichlet parameters are smoothed with an exponential moving
average; the uncertainty gap is the margin between the largest and
second-largest smoothed components. Confidence and gap thresholds track
batch means by EMA, and each sample lands in exactly one of three sets:

    reliable:  confidence >= tau_c  and  gap >= tau_e
    noisy:     confidence <  tau_c  and  gap <  tau_e
    ambiguous: everything else

Boundary equality always joins the >= branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EmaEvidence:
    """EMA-smoothed Dirichlet parameters keyed by sample id."""

    momentum: float = 0.9
    values: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def ema_update(state: EmaEvidence, sample_id: int, alpha: np.ndarray) -> EmaEvidence:
    """First observation initializes; later ones blend with momentum m:
    smoothed <- m * smoothed + (1 - m) * alpha."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 1.0):
        raise ValueError("Dirichlet parameters must be >= 1")
    prev = state.values.get(sample_id)
    if prev is None:
        state.values[sample_id] = alpha.copy()
    else:
        state.values[sample_id] = state.momentum * prev + (1.0 - state.momentum) * alpha
    return state


def uncertainty_gap(alpha_bar: np.ndarray) -> float:
    """Margin between the two largest smoothed components; a tied maximum
    yields exactly 0."""
    a = np.asarray(alpha_bar, dtype=np.float64)
    if a.size < 2:
        raise ValueError("need at least 2 classes")
    top = np.partition(a, -2)[-2:]
    return float(top[1] - top[0])


@dataclass
class FdasThresholds:
    """Dynamic confidence/gap thresholds; tau_e stays unset until the first
    batch fixes it to that batch's mean gap."""

    tau_c: float = 0.8
    tau_e: float | None = None
    momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.tau_c <= 1.0:
            raise ValueError("tau_c must lie in [0, 1]")
        if self.tau_e is not None and self.tau_e < 0:
            raise ValueError("tau_e must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def update_thresholds(th: FdasThresholds, confidences: np.ndarray,
                      gaps: np.ndarray) -> FdasThresholds:
    """EMA both thresholds toward the batch means."""
    confidences = np.asarray(confidences, dtype=np.float64)
    gaps = np.asarray(gaps, dtype=np.float64)
    if confidences.size == 0 or gaps.size == 0:
        raise ValueError("batch must be nonempty")
    m = th.momentum
    th.tau_c = m * th.tau_c + (1.0 - m) * float(confidences.mean())
    if th.tau_e is None:
        th.tau_e = float(gaps.mean())
    else:
        th.tau_e = m * th.tau_e + (1.0 - m) * float(gaps.mean())
    return th


@dataclass
class TriageResult:
    reliable_ids: list[int]
    ambiguous_ids: list[int]
    noisy_ids: list[int]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.reliable_ids), len(self.ambiguous_ids), len(self.noisy_ids)


def triage(samples: list[tuple[int, float, float]], th: FdasThresholds) -> TriageResult:
    """Partition (id, confidence, gap) records by the dual thresholds."""
    if th.tau_e is None:
        raise ValueError("tau_e unset; update thresholds from a batch first")
    reliable, ambiguous, noisy = [], [], []
    for sample_id, conf, gap in samples:
        conf_ok = conf >= th.tau_c
        gap_ok = gap >= th.tau_e
        if conf_ok and gap_ok:
            reliable.append(sample_id)
        elif not conf_ok and not gap_ok:
            noisy.append(sample_id)
        else:
            ambiguous.append(sample_id)
    return TriageResult(reliable, ambiguous, noisy)
