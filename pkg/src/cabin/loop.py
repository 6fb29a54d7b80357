"""The three-stage training protocol.

Stage 1 pretrains the evidential MLP on a small per-class seed drawn
from the train split; the remaining train samples form the query pool.
Stage 2 scores the pool with TTA-averaged uncertainty, thresholds it
into a high-uncertainty and a confident part, annotates a diverse
selection from the high part (simulated by revealing ground truth),
augments the annotated samples by uncertainty-scaled feature
perturbation, and pseudo-labels the rest of the pool. Stage 3 retrains
under the composite objective

    L = EDL(labeled + augmented) + lam_r * EDL(reliable) + lam_a * GCE(ambiguous)

where the reliable/ambiguous/noisy split of the pseudo set is re-decided
every epoch from EMA-smoothed evidence; noisy samples are excluded.

A matched-budget random-annotation baseline (same seeds, same budget,
same architecture, no selection/augmentation/triage logic) is available
for head-to-head comparisons.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import jsonio
from .datacube import (DatasetSplit, HyperCube, LabelMap, SplitSpec,
                       extract_all_patches, make_split, pca_reduce)
from .evidential import (MlpParams, OptimState, TtaConfig, add_grads, backward,
                         forward_batch, optim_step, tta_uncertainty, zero_grads)
from .fdas import (EmaEvidence, FdasThresholds, TriageResult, ema_update,
                   triage, uncertainty_gap, update_thresholds)
from .metrics import compute_metrics, confusion, default_palette, render_map
from .rng import SplitMix64
from .ugdss import (DegenerateDistributionError, GfpConfig, GfpStats,
                    LedgerEntry, SelectedSample, UncertaintyLedger,
                    adaptive_threshold, drqs_select, gfp_augment,
                    normalize_uncertainties, partition_pool)

_TAG_SEED_DRAW = 0x5EED
_TAG_PRETRAIN_EPOCH = 0x13E7
_TAG_RETRAIN_SUP = 0x2E51
_TAG_RETRAIN_RE = 0x2E52
_TAG_RETRAIN_AM = 0x2E53
_TAG_INIT = 0x91A1
_TAG_DRQS = 0xD205
_TAG_GFP = 0x6F90
_TAG_RANDOM_ANNOT = 0xAA07


@dataclass
class ProtocolConfig:
    """Every knob of the protocol; defaults follow the shared training
    regime (AdamW, batch 48, 100 epochs, loss weights 0.3)."""

    seed: int = 0
    # feature preparation
    pca_components: int = 30
    patch_size: int = 5
    standardize: bool = True
    # split
    train_per_class: int = 20
    val_per_class: int = 20
    small_class_test: int = 5
    small_class_val: int = 2
    # stage 1: pretraining
    pretrain_per_class: int = 10
    pretrain_epochs: int = 100
    pretrain_weight_decay: float = 0.0
    # model / optimizer
    hidden_dims: tuple[int, ...] = (128, 64)
    learning_rate: float = 1e-3
    batch_size: int = 48
    # TTA scoring
    tta_transforms: int = 8
    tta_jitter_sigma: float = 0.01
    # stage 2: sampling
    threshold_bins: int = 32
    threshold_delta: float = 0.0
    annotation_ratio: float = 0.5
    gfp_lambda_min: float = 0.05
    gfp_lambda_max: float = 0.5
    gfp_mix_weight: float = 0.5
    gfp_copies: int = 4
    # stage 3: retraining
    retrain_epochs: int = 100
    retrain_weight_decay: float = 5e-3
    lambda_reliable: float = 0.3
    lambda_ambiguous: float = 0.3
    gce_q: float = 0.7
    evidence_momentum: float = 0.9
    threshold_momentum: float = 0.9
    refresh_pseudo_labels: bool = True
    baseline: str = "cabin"

    def __post_init__(self):
        if not 0.0 <= self.annotation_ratio <= 1.0:
            raise ValueError("annotation_ratio must lie in [0, 1]")
        if self.lambda_reliable < 0 or self.lambda_ambiguous < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.baseline not in ("cabin", "random"):
            raise ValueError("baseline must be 'cabin' or 'random'")
        if isinstance(self.hidden_dims, list):
            self.hidden_dims = tuple(self.hidden_dims)

    def to_payload(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    def config_hash(self) -> str:
        text = jsonio.dumps(self.to_payload())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:10]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ProtocolConfig":
        """Build from string key/value pairs, rejecting unknown keys."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, known[key].type, key)
        return cls(**kwargs)


def _coerce(raw, type_hint: str, key: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if type_hint == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if type_hint == "int":
        return int(text)
    if type_hint == "float":
        return float(text)
    if type_hint.startswith("tuple"):
        return tuple(int(tok) for tok in text.split(",") if tok)
    return text


@dataclass
class PreparedData:
    """PCA-reduced, optionally standardized cube with patch features for
    every pixel (flat id order) and the seeded dataset split."""

    features: np.ndarray
    labels_flat: np.ndarray
    split: DatasetSplit
    height: int
    width: int
    bands: int
    patch_size: int
    num_classes: int

    def windows(self, ids: list[int]) -> np.ndarray:
        s, b = self.patch_size, self.bands
        return self.features[ids].reshape(len(ids), s, s, b)


def prepare(cube: HyperCube, labels: LabelMap, config: ProtocolConfig) -> PreparedData:
    if (cube.height, cube.width) != (labels.height, labels.width):
        raise ValueError("cube and labels disagree on the grid")
    comps = min(config.pca_components, cube.bands)
    reduced = pca_reduce(cube, comps)
    values = reduced.values
    if config.standardize:
        flat = values.reshape(-1, comps)
        std = flat.std(axis=0)
        values = (values - flat.mean(axis=0)) / np.maximum(std, 1e-12)
        reduced = HyperCube(cube.height, cube.width, comps, values)
    features = extract_all_patches(reduced, config.patch_size)
    spec = SplitSpec(train_per_class=config.train_per_class,
                     val_per_class=config.val_per_class,
                     small_class_test=config.small_class_test,
                     small_class_val=config.small_class_val,
                     seed=config.seed)
    split = make_split(labels, spec)
    return PreparedData(features=features, labels_flat=labels.flat.copy(),
                        split=split, height=cube.height, width=cube.width,
                        bands=comps, patch_size=config.patch_size,
                        num_classes=labels.num_classes)


@dataclass
class PretrainResult:
    params: MlpParams
    seed_ids: list[int]
    pool_ids: list[int]
    ledger: UncertaintyLedger
    loss_curve: list[float]
    warnings: list[str]


def _train_supervised(params: MlpParams, optim: OptimState, x: np.ndarray,
                      y: np.ndarray, epochs: int, batch_size: int,
                      shuffle_seed: int, tag: int) -> list[float]:
    """Epochs of minibatch EDL training; returns the per-epoch mean loss."""
    curve = []
    n = x.shape[0]
    if n == 0:
        return curve
    for epoch in range(epochs):
        order = list(range(n))
        SplitMix64.derive(shuffle_seed, tag, epoch).shuffle(order)
        losses = []
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            grads, loss = backward(params, x[batch], y[batch], "edl")
            optim_step(params, grads, optim)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return curve


def pretrain(config: ProtocolConfig, prepared: PreparedData) -> PretrainResult:
    """Stage 1: train on a per-class seed; score the leftover pool."""
    flat = prepared.labels_flat
    seed_ids: list[int] = []
    warnings: list[str] = []
    for k in range(1, prepared.num_classes + 1):
        class_train = [i for i in prepared.split.train_ids if flat[i] == k]
        want = config.pretrain_per_class
        if len(class_train) < want:
            take = max(len(class_train) - 1, 0)
            warnings.append(
                f"class {k}: only {len(class_train)} train samples, "
                f"seeding {take} instead of {want}")
        else:
            take = want
        rng = SplitMix64.derive(config.seed, _TAG_SEED_DRAW, k)
        seed_ids.extend(rng.sample(class_train, take))
    seed_set = set(seed_ids)
    pool_ids = [i for i in prepared.split.train_ids if i not in seed_set]

    dims = [prepared.features.shape[1], *config.hidden_dims, prepared.num_classes]
    params = MlpParams.init(dims, SplitMix64.derive(config.seed, _TAG_INIT).next_u64())
    optim = OptimState.for_params(params, lr=config.learning_rate,
                                  weight_decay=config.pretrain_weight_decay)
    x = prepared.features[seed_ids]
    y = flat[seed_ids] - 1
    curve = _train_supervised(params, optim, x, y, config.pretrain_epochs,
                              config.batch_size, config.seed, _TAG_PRETRAIN_EPOCH)

    tta_cfg = TtaConfig(num_transforms=config.tta_transforms,
                        jitter_sigma=config.tta_jitter_sigma, seed=config.seed)
    entries = []
    if pool_ids:
        _, embeddings = forward_batch(params, prepared.features[pool_ids])
        wins = prepared.windows(pool_ids)
        for row, pid in enumerate(pool_ids):
            u_hat = tta_uncertainty(params, wins[row], tta_cfg, sample_tag=pid)
            entries.append(LedgerEntry(sample_id=pid, u_hat=min(max(u_hat, 0.0), 1.0),
                                       embedding=embeddings[row].copy()))
    ledger = UncertaintyLedger(entries)
    return PretrainResult(params=params, seed_ids=seed_ids, pool_ids=pool_ids,
                          ledger=ledger, loss_curve=curve, warnings=warnings)


@dataclass
class SamplingResult:
    annotated_ids: list[int]
    annotated_labels: np.ndarray
    augmented_features: np.ndarray
    augmented_labels: np.ndarray
    pseudo_ids: list[int]
    pseudo_labels: np.ndarray
    report: dict


def sampling_round(params: MlpParams, ledger: UncertaintyLedger,
                   prepared: PreparedData, config: ProtocolConfig) -> SamplingResult:
    """Stage 2: threshold, select, annotate, augment, pseudo-label."""
    pool_ids = ledger.ids
    n_pool = len(pool_ids)
    empty = SamplingResult([], np.empty(0, np.int64), np.empty((0, prepared.features.shape[1])),
                           np.empty(0, np.int64), [], np.empty(0, np.int64),
                           report={"pool_size": 0, "budget_target": 0, "annotated": 0,
                                   "t_u": None, "threshold_fallback": False,
                                   "selection_fallback": False, "n_high": 0, "n_confident": 0,
                                   "selected_ids": [], "lambda_per_sample": {}})
    if n_pool == 0:
        return empty

    m_target = math.ceil(config.annotation_ratio * n_pool)
    degenerate = False
    try:
        thr = adaptive_threshold(ledger, bins=config.threshold_bins,
                                 delta=config.threshold_delta)
        high_ids, low_ids = partition_pool(ledger, thr.t_u)
    except DegenerateDistributionError:
        thr = None
        degenerate = True
        high_ids, low_ids = [], list(pool_ids)

    u_by_id = {e.sample_id: e.u_hat for e in ledger.entries}
    selection_fallback = False
    selection = None
    if m_target == 0:
        annotated: list[int] = []
    elif not high_ids:
        # no high-uncertainty bucket: take the budget directly by uncertainty
        selection_fallback = True
        ranked = sorted(pool_ids, key=lambda i: (-u_by_id[i], i))
        annotated = ranked[:min(m_target, n_pool)]
    else:
        m = min(m_target, len(high_ids))
        high_set = set(high_ids)
        emb = np.stack([e.embedding for e in ledger.entries if e.sample_id in high_set])
        selection = drqs_select(high_ids, emb, m,
                                SplitMix64.derive(config.seed, _TAG_DRQS).next_u64())
        annotated = list(selection.selected_ids)

    annotated_labels = prepared.labels_flat[annotated] - 1 if annotated else np.empty(0, np.int64)

    # normalized uncertainty over the pool drives the perturbation scale
    u_norm_all = normalize_uncertainties(ledger.uncertainties)
    u_norm = {pid: float(u) for pid, u in zip(pool_ids, u_norm_all)}

    pool_features = prepared.features[pool_ids]
    clamp_lo = pool_features.min(axis=0) if n_pool else None
    clamp_hi = pool_features.max(axis=0) if n_pool else None

    aug_x = np.empty((0, prepared.features.shape[1]))
    aug_y = np.empty(0, np.int64)
    lambdas: dict[int, float] = {}
    if annotated and config.gfp_copies > 0:
        ann_features = prepared.features[annotated]
        global_var = ann_features.var(axis=0)
        local_var: dict[int, np.ndarray] = {}
        if selection is not None and selection.assignments is not None:
            cand_index = {cid: i for i, cid in enumerate(selection.candidate_ids)}
            cand_features = prepared.features[selection.candidate_ids]
            for cluster_j, sid in enumerate(selection.selected_ids):
                members = np.flatnonzero(selection.assignments ==
                                         selection.assignments[cand_index[sid]])
                local_var[sid] = cand_features[members].var(axis=0)
        records = [SelectedSample(sample_id=sid, u_norm=u_norm[sid],
                                  features=prepared.features[sid],
                                  label=int(prepared.labels_flat[sid] - 1))
                   for sid in annotated]
        gfp_cfg = GfpConfig(lam_min=config.gfp_lambda_min, lam_max=config.gfp_lambda_max,
                            mix_weight=config.gfp_mix_weight,
                            copies_per_sample=config.gfp_copies,
                            clamp_lo=clamp_lo, clamp_hi=clamp_hi,
                            seed=SplitMix64.derive(config.seed, _TAG_GFP).next_u64())
        augmented = gfp_augment(records, GfpStats(global_var=global_var,
                                                  local_var=local_var), gfp_cfg)
        if augmented:
            aug_x = np.stack([a.features for a in augmented])
            aug_y = np.array([a.label for a in augmented], dtype=np.int64)
        lambdas = {rec.sample_id: rec.u_norm * (config.gfp_lambda_max - config.gfp_lambda_min)
                   + config.gfp_lambda_min for rec in records}

    annotated_set = set(annotated)
    pseudo_ids = [i for i in pool_ids if i not in annotated_set]
    if pseudo_ids:
        alpha, _ = forward_batch(params, prepared.features[pseudo_ids])
        pseudo_labels = np.argmax(alpha, axis=1).astype(np.int64)
    else:
        pseudo_labels = np.empty(0, np.int64)

    report = {
        "pool_size": n_pool,
        "budget_target": m_target,
        "annotated": len(annotated),
        "t_u": None if thr is None else float(thr.t_u),
        "threshold_fallback": bool(thr.fallback_used) if thr is not None else True,
        "degenerate_pool": degenerate,
        "selection_fallback": selection_fallback,
        "n_high": len(high_ids),
        "n_confident": len(low_ids),
        "selected_ids": [int(i) for i in annotated],
        "lambda_per_sample": {str(k): float(v) for k, v in sorted(lambdas.items())},
    }
    return SamplingResult(annotated_ids=annotated, annotated_labels=annotated_labels,
                          augmented_features=aug_x, augmented_labels=aug_y,
                          pseudo_ids=pseudo_ids, pseudo_labels=pseudo_labels,
                          report=report)


@dataclass
class RoundState:
    """Everything stage 3 mutates epoch to epoch."""

    params: MlpParams
    optim: OptimState
    labeled_ids: list[int]
    labeled_y: np.ndarray
    augmented_x: np.ndarray
    augmented_y: np.ndarray
    pseudo_ids: list[int]
    pseudo_y: np.ndarray
    ema: EmaEvidence
    thresholds: FdasThresholds
    current_triage: TriageResult = field(default_factory=lambda: TriageResult([], [], []))
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def init_round_state(params: MlpParams, pre: PretrainResult,
                     sampling: SamplingResult, prepared: PreparedData,
                     config: ProtocolConfig) -> RoundState:
    labeled_ids = list(pre.seed_ids) + list(sampling.annotated_ids)
    labeled_y = prepared.labels_flat[labeled_ids] - 1 if labeled_ids else np.empty(0, np.int64)
    optim = OptimState.for_params(params, lr=config.learning_rate,
                                  weight_decay=config.retrain_weight_decay)
    return RoundState(params=params, optim=optim, labeled_ids=labeled_ids,
                      labeled_y=labeled_y,
                      augmented_x=sampling.augmented_features,
                      augmented_y=sampling.augmented_labels,
                      pseudo_ids=list(sampling.pseudo_ids),
                      pseudo_y=sampling.pseudo_labels.copy(),
                      ema=EmaEvidence(momentum=config.evidence_momentum),
                      thresholds=FdasThresholds(momentum=config.threshold_momentum))


def _cycled_batch(order: list[int], cursor: int, size: int) -> tuple[list[int], int]:
    if not order:
        return [], cursor
    batch = []
    for _ in range(min(size, len(order))):
        batch.append(order[cursor])
        cursor = (cursor + 1) % len(order)
    return batch, cursor


def total_objective(params: MlpParams, sup_x, sup_y, re_x, re_y, am_x, am_y,
                    lam_r: float, lam_a: float, q: float = 0.7) -> float:
    """Composite objective value; empty sets contribute zero."""
    total = 0.0
    if len(sup_x):
        alpha, _ = forward_batch(params, sup_x)
        s = alpha.sum(axis=1)
        total += float(np.mean(np.log(s) - np.log(alpha[np.arange(len(sup_y)), sup_y])))
    if lam_r and len(re_x):
        alpha, _ = forward_batch(params, re_x)
        s = alpha.sum(axis=1)
        total += lam_r * float(np.mean(np.log(s) - np.log(alpha[np.arange(len(re_y)), re_y])))
    if lam_a and len(am_x):
        alpha, _ = forward_batch(params, am_x)
        s = alpha.sum(axis=1)
        p_y = alpha[np.arange(len(am_y)), am_y] / s
        total += lam_a * float(np.mean((1.0 - p_y ** q) / q))
    return total


def retrain_epoch(state: RoundState, prepared: PreparedData,
                  config: ProtocolConfig) -> RoundState:
    """One stage-3 epoch: re-score the pseudo set, update EMA evidence and
    thresholds, triage, then minimize the composite objective."""
    pseudo_index = {pid: i for i, pid in enumerate(state.pseudo_ids)}
    if state.pseudo_ids:
        alpha, _ = forward_batch(state.params, prepared.features[state.pseudo_ids])
        s = alpha.sum(axis=1, keepdims=True)
        probs = alpha / s
        conf = probs.max(axis=1)
        argmax = np.argmax(alpha, axis=1).astype(np.int64)
        if config.refresh_pseudo_labels:
            state.pseudo_y = argmax
        for row, pid in enumerate(state.pseudo_ids):
            ema_update(state.ema, pid, alpha[row])
        gaps = np.array([uncertainty_gap(state.ema.values[pid])
                         for pid in state.pseudo_ids])
        for start in range(0, len(state.pseudo_ids), config.batch_size):
            sl = slice(start, start + config.batch_size)
            update_thresholds(state.thresholds, conf[sl], gaps[sl])
        records = [(pid, float(conf[i]), float(gaps[i]))
                   for i, pid in enumerate(state.pseudo_ids)]
        state.current_triage = triage(records, state.thresholds)
    else:
        state.current_triage = TriageResult([], [], [])

    sup_x = prepared.features[state.labeled_ids]
    sup_y = state.labeled_y
    if len(state.augmented_x):
        sup_x = np.concatenate([sup_x, state.augmented_x])
        sup_y = np.concatenate([sup_y, state.augmented_y])
    if sup_x.shape[0] == 0:
        raise ValueError("retraining requires at least one labeled sample")

    re_ids = state.current_triage.reliable_ids if config.lambda_reliable > 0 else []
    am_ids = state.current_triage.ambiguous_ids if config.lambda_ambiguous > 0 else []
    re_x = prepared.features[re_ids] if re_ids else np.empty((0, sup_x.shape[1]))
    re_y = np.array([state.pseudo_y[pseudo_index[i]] for i in re_ids], dtype=np.int64)
    am_x = prepared.features[am_ids] if am_ids else np.empty((0, sup_x.shape[1]))
    am_y = np.array([state.pseudo_y[pseudo_index[i]] for i in am_ids], dtype=np.int64)

    sup_order = list(range(sup_x.shape[0]))
    SplitMix64.derive(config.seed, _TAG_RETRAIN_SUP, state.epoch).shuffle(sup_order)
    re_order = list(range(len(re_ids)))
    if re_order:
        SplitMix64.derive(config.seed, _TAG_RETRAIN_RE, state.epoch).shuffle(re_order)
    am_order = list(range(len(am_ids)))
    if am_order:
        SplitMix64.derive(config.seed, _TAG_RETRAIN_AM, state.epoch).shuffle(am_order)

    steps = math.ceil(len(sup_order) / config.batch_size)
    re_cur = am_cur = 0
    sup_losses = []
    for j in range(steps):
        batch = sup_order[j * config.batch_size:(j + 1) * config.batch_size]
        grads, loss = backward(state.params, sup_x[batch], sup_y[batch], "edl")
        sup_losses.append(loss)
        acc = add_grads(zero_grads(state.params), grads)
        if re_order:
            re_batch, re_cur = _cycled_batch(re_order, re_cur, config.batch_size)
            g_re, _ = backward(state.params, re_x[re_batch], re_y[re_batch], "edl",
                               scale=config.lambda_reliable)
            add_grads(acc, g_re)
        if am_order:
            am_batch, am_cur = _cycled_batch(am_order, am_cur, config.batch_size)
            g_am, _ = backward(state.params, am_x[am_batch], am_y[am_batch], "gce",
                               q=config.gce_q, scale=config.lambda_ambiguous)
            add_grads(acc, g_am)
        optim_step(state.params, acc, state.optim)

    objective = total_objective(state.params, sup_x, sup_y, re_x, re_y, am_x, am_y,
                                config.lambda_reliable, config.lambda_ambiguous,
                                config.gce_q)
    val_acc = None
    if prepared.split.val_ids:
        alpha, _ = forward_batch(state.params, prepared.features[prepared.split.val_ids])
        pred = np.argmax(alpha, axis=1) + 1
        val_acc = float(np.mean(pred == prepared.labels_flat[prepared.split.val_ids]))
    n_re, n_am, n_no = state.current_triage.counts
    state.history.append({
        "epoch": state.epoch,
        "objective": objective,
        "supervised_loss": float(np.mean(sup_losses)),
        "reliable": n_re,
        "ambiguous": n_am,
        "noisy": n_no,
        "tau_c": float(state.thresholds.tau_c),
        "tau_e": None if state.thresholds.tau_e is None else float(state.thresholds.tau_e),
        "val_accuracy": val_acc,
    })
    state.epoch += 1
    return state


def _random_annotation(pre: PretrainResult, prepared: PreparedData,
                       config: ProtocolConfig, budget: int) -> SamplingResult:
    """Uniform annotation of the same budget; no selection, augmentation,
    or pseudo-labeling."""
    rng = SplitMix64.derive(config.seed, _TAG_RANDOM_ANNOT)
    budget = min(budget, len(pre.pool_ids))
    annotated = rng.sample(pre.pool_ids, budget)
    report = {
        "pool_size": len(pre.pool_ids),
        "budget_target": budget,
        "annotated": budget,
        "t_u": None,
        "threshold_fallback": False,
        "degenerate_pool": False,
        "selection_fallback": False,
        "n_high": 0,
        "n_confident": 0,
        "selected_ids": [int(i) for i in annotated],
        "lambda_per_sample": {},
    }
    return SamplingResult(annotated_ids=annotated,
                          annotated_labels=prepared.labels_flat[annotated] - 1
                          if annotated else np.empty(0, np.int64),
                          augmented_features=np.empty((0, prepared.features.shape[1])),
                          augmented_labels=np.empty(0, np.int64),
                          pseudo_ids=[], pseudo_labels=np.empty(0, np.int64),
                          report=report)


def evaluate(params: MlpParams, prepared: PreparedData, ids: list[int]):
    alpha, _ = forward_batch(params, prepared.features[ids])
    pred = np.argmax(alpha, axis=1) + 1
    truth = prepared.labels_flat[ids]
    return confusion(truth, pred, num_classes=prepared.num_classes)


def run_experiment(config: ProtocolConfig, cube: HyperCube, labels: LabelMap,
                   budget_override: int | None = None):
    """Full protocol; returns (report dict, artifacts dict).

    Artifacts hold the rendered maps and the wall-clock timing, which
    stays out of the report so reports are byte-stable across reruns.
    """
    t0 = time.perf_counter()
    prepared = prepare(cube, labels, config)
    pre = pretrain(config, prepared)

    if config.baseline == "random":
        budget = budget_override
        if budget is None:
            budget = math.ceil(config.annotation_ratio * len(pre.pool_ids))
        sampling = _random_annotation(pre, prepared, config, budget)
    else:
        sampling = sampling_round(pre.params, pre.ledger, prepared, config)

    state = init_round_state(pre.params, pre, sampling, prepared, config)
    for _ in range(config.retrain_epochs):
        retrain_epoch(state, prepared, config)

    cm = evaluate(state.params, prepared, prepared.split.test_ids)
    metrics_report = compute_metrics(cm)

    val_curve = [h["val_accuracy"] for h in state.history if h["val_accuracy"] is not None]
    best_epoch = int(np.argmax(val_curve)) if val_curve else None

    report = {
        "config": config.to_payload(),
        "config_hash": config.config_hash(),
        "mode": config.baseline,
        "pretrain": {
            "seed_ids": [int(i) for i in pre.seed_ids],
            "pool_size": len(pre.pool_ids),
            "loss_curve": pre.loss_curve,
            "warnings": pre.warnings,
        },
        "sampling": sampling.report,
        "retrain": {"epochs": state.history},
        "validation": {
            "best_epoch": best_epoch,
            "best_accuracy": None if best_epoch is None else jsonio.Fixed6(val_curve[best_epoch]),
        },
        "metrics": metrics_report.as_payload(),
        "confusion": [[int(v) for v in row] for row in cm.counts],
    }

    alpha, _ = forward_batch(state.params, prepared.features)
    pred_grid = (np.argmax(alpha, axis=1) + 1).reshape(prepared.height, prepared.width)
    u_grid = (prepared.num_classes / alpha.sum(axis=1)).reshape(prepared.height,
                                                                prepared.width)
    palette = default_palette(prepared.num_classes)
    artifacts = {
        "classification_ppm": render_map(pred_grid, palette),
        "uncertainty_ppm": render_map(u_grid, None),
        "wall_clock_seconds": time.perf_counter() - t0,
        "state": state,
    }
    return report, artifacts
