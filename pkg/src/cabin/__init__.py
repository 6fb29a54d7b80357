"""Uncertainty-guided semi-supervised learning loop for hyperspectral
patch classification: evidential uncertainty perception, dual sampling
with diverse query selection and feature perturbation, and fine-grained
pseudo-label triage."""

__version__ = "0.1.0"

from .datacube import (HyperCube, LabelMap, Patch, SplitSpec, DatasetSplit,
                       load_cube, save_cube, load_labels, save_labels,
                       generate_synthetic, pca_reduce, extract_patch, make_split)
from .evidential import (EvidenceOutput, MlpParams, OptimState, TtaConfig,
                         forward, edl_loss, gce_loss, backward, optim_step,
                         tta_uncertainty)
from .fdas import (EmaEvidence, FdasThresholds, TriageResult, ema_update,
                   uncertainty_gap, update_thresholds, triage)
from .loop import ProtocolConfig, run_experiment
from .metrics import ConfusionMatrix, MetricReport, confusion, compute_metrics, render_map
from .ugdss import (UncertaintyLedger, LedgerEntry, ThresholdResult, QuerySelection,
                    GfpConfig, adaptive_threshold, partition_pool, drqs_select,
                    gfp_augment)
