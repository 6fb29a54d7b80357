"""Evidential classifier: MLP with a softplus evidence head, its losses,
analytic gradients, an AdamW optimizer, and TTA-averaged uncertainty.

The network maps a flattened patch to K nonnegative evidence values e.
Dirichlet parameters are alpha = e + 1, total evidence S = sum(alpha),
predicted probabilities p = alpha / S, and epistemic uncertainty
u = K / S. The supervised loss is log(S) - log(alpha[target]); the
noise-robust pseudo-label loss is (1 - (alpha[y]/S)^q) / q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datacube import NumericError
from .rng import SplitMix64

TTA_KINDS = ("identity", "hflip", "vflip", "rot90", "jitter")

_TAG_LAYER = 0x11AE


def softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) computed without overflow."""
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class EvidenceOutput:
    """Evidence vector and the Dirichlet quantities derived from it."""

    evidence: np.ndarray
    alpha: np.ndarray
    total: float
    probs: np.ndarray
    uncertainty: float

    @classmethod
    def from_evidence(cls, evidence: np.ndarray) -> "EvidenceOutput":
        e = np.asarray(evidence, dtype=np.float64)
        if e.ndim != 1 or e.size < 2:
            raise ValueError("evidence must be a vector of length >= 2")
        if np.any(e < 0) or not np.all(np.isfinite(e)):
            raise ValueError("evidence must be finite and nonnegative")
        alpha = e + 1.0
        total = float(alpha.sum())
        return cls(evidence=e, alpha=alpha, total=total,
                   probs=alpha / total, uncertainty=len(e) / total)


@dataclass
class MlpParams:
    """Per-layer weights (out x in) and biases; last layer is the evidence head."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must pair up")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def init(cls, layer_dims: list[int], seed: int) -> "MlpParams":
        """He-style init: W ~ N(0, 2/fan_in), biases zero."""
        if len(layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        weights, biases = [], []
        for i in range(len(layer_dims) - 1):
            fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
            rng = SplitMix64.derive(seed, _TAG_LAYER, i)
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.normals((fan_out, fan_in)) * scale)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b)
        return np.concatenate(parts)

    def assign_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = vec[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = vec[pos:pos + b.size]
            pos += b.size
        if pos != vec.size:
            raise ValueError("flat vector length mismatch")


def save_params(params: MlpParams, path) -> None:
    """Checkpoint: ASCII dims header line, then all layers as little-endian
    float64 (each weight matrix row-major, then its bias)."""
    header = "mlp " + " ".join(str(d) for d in params.layer_dims) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for w, b in zip(params.weights, params.biases):
            fh.write(w.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())


def load_params(path) -> MlpParams:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if not header or header[0] != "mlp" or len(header) < 3:
            raise ValueError("not an mlp checkpoint")
        dims = [int(tok) for tok in header[1:]]
        weights, biases = [], []
        for i in range(len(dims) - 1):
            n_w = dims[i + 1] * dims[i]
            w = np.frombuffer(fh.read(8 * n_w), dtype="<f8").reshape(dims[i + 1], dims[i])
            b = np.frombuffer(fh.read(8 * dims[i + 1]), dtype="<f8")
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        if fh.read(1):
            raise ValueError("trailing bytes in checkpoint")
    return MlpParams(weights, biases)


def _forward_cache(params: MlpParams, x: np.ndarray):
    """Batch forward keeping pre-activations for backprop.

    Returns (alpha, embeddings, zs, activations) where activations[i] is
    the input to layer i and zs[i] its pre-activation output.
    """
    acts = [x]
    zs = []
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        zs.append(z)
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
    evidence = softplus(zs[-1])
    alpha = evidence + 1.0
    if not np.all(np.isfinite(alpha)):
        raise NumericError("non-finite activation in forward pass")
    return alpha, acts[-1], zs, acts


def forward_batch(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(alpha, embedding) for a batch; embedding is the last hidden activation."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    alpha, embed, _, _ = _forward_cache(params, x)
    return alpha, embed


def forward(params: MlpParams, patch: np.ndarray) -> tuple[EvidenceOutput, np.ndarray]:
    """Single-sample forward pass; returns the evidence output and embedding."""
    alpha, embed = forward_batch(params, patch)
    return EvidenceOutput.from_evidence(alpha[0] - 1.0), embed[0]


def edl_loss(output: EvidenceOutput, target: np.ndarray) -> float:
    """Evidential loss for a one-hot target: log(S) - log(alpha[y])."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != output.alpha.shape or not np.isclose(t.sum(), 1.0) or set(np.unique(t)) - {0.0, 1.0}:
        raise ValueError("target must be one-hot")
    y = int(np.argmax(t))
    return float(np.log(output.total) - np.log(output.alpha[y]))


def gce_loss(output: EvidenceOutput, pseudo_label: int, q: float = 0.7) -> float:
    """Generalized cross entropy on the Dirichlet mean: (1 - p_y^q) / q."""
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if not 0 <= pseudo_label < len(output.alpha):
        raise ValueError("pseudo_label out of range")
    p_y = output.alpha[pseudo_label] / output.total
    return float((1.0 - p_y ** q) / q)


def edl_loss_batch(alpha: np.ndarray, y: np.ndarray) -> np.ndarray:
    s = alpha.sum(axis=1)
    return np.log(s) - np.log(alpha[np.arange(len(y)), y])


def gce_loss_batch(alpha: np.ndarray, y: np.ndarray, q: float = 0.7) -> np.ndarray:
    s = alpha.sum(axis=1)
    p_y = alpha[np.arange(len(y)), y] / s
    return (1.0 - p_y ** q) / q


def backward(params: MlpParams, x: np.ndarray, y: np.ndarray, loss_kind: str,
             q: float = 0.7, scale: float = 1.0):
    """Mean-gradient of the chosen loss over a batch.

    loss_kind is "edl" or "gce"; y holds integer class indices. Returns
    (grads, mean_loss) where grads pairs (dW, db) per layer, scaled by
    ``scale`` for objective composition.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if loss_kind not in ("edl", "gce"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    n = x.shape[0]
    alpha, _, zs, acts = _forward_cache(params, x)
    s = alpha.sum(axis=1, keepdims=True)
    idx = np.arange(n)
    if loss_kind == "edl":
        loss = float(np.mean(np.log(s[:, 0]) - np.log(alpha[idx, y])))
        dalpha = np.zeros_like(alpha) + 1.0 / s
        dalpha[idx, y] -= 1.0 / alpha[idx, y]
    else:
        p_y = alpha[idx, y] / s[:, 0]
        loss = float(np.mean((1.0 - p_y ** q) / q))
        # d/dalpha_k of -(alpha_y / S)^q / q = -p_y^(q-1) * (delta_ky/S - alpha_y/S^2)
        coef = p_y ** (q - 1.0)
        dalpha = (coef * alpha[idx, y] / s[:, 0] ** 2)[:, None] * np.ones_like(alpha)
        dalpha[idx, y] -= coef / s[:, 0]
    # evidence head: alpha = softplus(z) + 1, so dalpha/dz = sigmoid(z)
    delta = dalpha * sigmoid(zs[-1]) / n
    grads = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        dw = delta.T @ acts[i] * scale
        db = delta.sum(axis=0) * scale
        grads[i] = (dw, db)
        if i > 0:
            delta = (delta @ params.weights[i]) * (zs[i - 1] > 0)
    for dw, db in grads:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NumericError("non-finite gradient")
    return grads, loss


def zero_grads(params: MlpParams):
    return [(np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(params.weights, params.biases)]


def add_grads(acc, grads):
    for (aw, ab), (gw, gb) in zip(acc, grads):
        aw += gw
        ab += gb
    return acc


@dataclass
class OptimState:
    """AdamW moments and hyperparameters; weight decay is decoupled."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-3,
                   weight_decay: float = 0.0, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "OptimState":
        shapes = []
        for w, b in zip(params.weights, params.biases):
            shapes.append(np.zeros_like(w))
            shapes.append(np.zeros_like(b))
        m = [np.zeros_like(a) for a in shapes]
        v = [np.zeros_like(a) for a in shapes]
        return cls(m=m, v=v, step=0, lr=lr, weight_decay=weight_decay,
                   beta1=beta1, beta2=beta2, eps=eps)


def optim_step(params: MlpParams, grads, state: OptimState):
    """One AdamW update in place: bias-corrected moments plus decoupled decay."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    tensors = []
    for (w, b), (gw, gb) in zip(zip(params.weights, params.biases), grads):
        tensors.append((w, gw))
        tensors.append((b, gb))
    for i, (p, g) in enumerate(tensors):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class TtaConfig:
    """Test-time augmentation: how many transformed variants to average."""

    num_transforms: int = 8
    kinds: tuple[str, ...] = TTA_KINDS
    jitter_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.num_transforms < 1:
            raise ValueError("num_transforms must be >= 1")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be nonnegative")
        unknown = set(self.kinds) - set(TTA_KINDS)
        if unknown:
            raise ValueError(f"unknown transform kinds: {sorted(unknown)}")


@dataclass
class TransformStep:
    kind: str
    jitter: np.ndarray | None = None


def tta_plan(cfg: TtaConfig, sample_tag: int, bands: int) -> list[TransformStep]:
    """Materialize the seeded transform sequence for one sample.

    Jitter noise is attached to its step, so applying the steps in any
    order yields the same set of variants.
    """
    rng = SplitMix64.derive(cfg.seed, 0x77A, sample_tag)
    steps = []
    for _ in range(cfg.num_transforms):
        kind = cfg.kinds[rng.randint(len(cfg.kinds))]
        jitter = rng.normals(bands) * cfg.jitter_sigma if kind == "jitter" else None
        steps.append(TransformStep(kind=kind, jitter=jitter))
    return steps


def apply_transform(window: np.ndarray, step: TransformStep) -> np.ndarray:
    """Apply one spatial/spectral transform to an S x S x B window."""
    if step.kind == "identity":
        return window
    if step.kind == "hflip":
        return window[:, ::-1, :]
    if step.kind == "vflip":
        return window[::-1, :, :]
    if step.kind == "rot90":
        return np.rot90(window, k=1, axes=(0, 1))
    if step.kind == "jitter":
        if step.jitter is None:
            raise ValueError("jitter step carries no noise vector")
        return window + step.jitter
    raise ValueError(f"unknown transform kind {step.kind!r}")


def tta_uncertainty(params: MlpParams, window: np.ndarray, cfg: TtaConfig,
                    sample_tag: int = 0) -> float:
    """Mean epistemic uncertainty over the seeded transformed variants."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3:
        raise ValueError("window must be S x S x B")
    steps = tta_plan(cfg, sample_tag, window.shape[2])
    variants = np.stack([apply_transform(window, st).reshape(-1) for st in steps])
    alpha, _ = forward_batch(params, variants)
    k = alpha.shape[1]
    u = k / alpha.sum(axis=1)
    return float(u.mean())
