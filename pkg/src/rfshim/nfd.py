"""Non-uniformity field detector.

A small strided-convolution classifier over combined magnitude maps that
flags shimming outcomes with voids or severe artifacts. Labels for training
and evaluation come from an explicit, auditable criterion rather than visual
inspection: a masked map is non-uniform when its min/mean ratio drops below
``min_ratio`` or its coefficient of variation exceeds ``max_cov``. Both
statistics are scale-invariant, so rescaling a map never changes its label.

The confidence convention is 1 = uniform; a map is labeled uniform when the
logistic output reaches the model threshold. The detector only flags maps,
it never modifies weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import GenerationShortfallError, InvalidArgumentError
from .fields import Dataset, SliceRecord
from .objective import ShimWeights, combine
from .solvers import AdamState, adam_step

LABEL_UNIFORM = "uniform"
LABEL_NON_UNIFORM = "non_uniform"
DEFAULT_MIN_RATIO = 0.15
DEFAULT_MAX_COV = 0.35
NFD_VERSION = 1
_CONF_CLIP = 1e-12


@dataclass(frozen=True)
class NfdSample:
    """Masked magnitude map with its criterion label and provenance."""

    magnitude: np.ndarray
    label: str
    source: str

    def __post_init__(self):
        if self.magnitude.ndim != 2:
            raise InvalidArgumentError("magnitude map must be 2-D")
        if not np.all(np.isfinite(self.magnitude)) or np.any(self.magnitude < 0):
            raise InvalidArgumentError("magnitude map must be finite and >= 0")
        if self.label not in (LABEL_UNIFORM, LABEL_NON_UNIFORM):
            raise InvalidArgumentError(f"unknown label {self.label!r}")


@dataclass(frozen=True)
class NfdArch:
    """Stride-2 conv layers, flattened feature map, one logistic unit."""

    grid_size: int
    widths: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if self.grid_size < 8:
            raise InvalidArgumentError("grid_size must be >= 8")
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise InvalidArgumentError("widths must be positive")

    @property
    def feature_grid(self) -> int:
        n = self.grid_size
        for _ in self.widths:
            n = (n + 1) // 2
        return n


def _nfd_layout(arch: NfdArch) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    in_ch = 1
    for i, width in enumerate(arch.widths):
        layout += [
            (f"conv{i}", (width, in_ch, 3, 3)),
            (f"scale{i}", (width,)),
            (f"bias{i}", (width,)),
        ]
        in_ch = width
    feat = arch.feature_grid
    layout += [("head.weight", (1, in_ch * feat * feat)), ("head.bias", (1,))]
    return layout


def nfd_parameter_count(arch: NfdArch) -> int:
    return sum(int(np.prod(shape)) for _, shape in _nfd_layout(arch))


@dataclass
class NfdModel:
    """Classifier parameters plus the decision threshold (default 0.5)."""

    arch: NfdArch
    params: np.ndarray
    threshold: float = 0.5
    version: int = NFD_VERSION

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (nfd_parameter_count(self.arch),):
            raise InvalidArgumentError(
                f"flat parameter vector must have {nfd_parameter_count(self.arch)} entries"
            )

    def unflatten(self) -> list[np.ndarray]:
        arrays = []
        offset = 0
        for _, shape in _nfd_layout(self.arch):
            size = int(np.prod(shape))
            arrays.append(self.params[offset : offset + size].reshape(shape))
            offset += size
        return arrays


def build_nfd(grid_size: int, widths=(8, 16, 32), seed: int = 0) -> NfdModel:
    """He-initialized classifier; the head starts near zero so an untrained
    model emits confidences close to 0.5."""
    arch = NfdArch(grid_size=grid_size, widths=tuple(widths))
    rng = np.random.default_rng([np.uint64(seed), np.uint64(0x0FD)])
    chunks = []
    for name, shape in _nfd_layout(arch):
        if name.startswith("conv"):
            fan_in = int(np.prod(shape[1:]))
            chunks.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).ravel())
        elif name.startswith("scale"):
            chunks.append(np.ones(shape).ravel())
        elif name == "head.weight":
            chunks.append(rng.normal(0.0, 0.01 / math.sqrt(shape[1]), size=shape).ravel())
        else:
            chunks.append(np.zeros(shape).ravel())
    return NfdModel(arch=arch, params=np.concatenate(chunks))


def uniformity_stats(magnitude: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """(min/mean, coefficient of variation) of the masked magnitude."""
    vals = magnitude[mask]
    if vals.size == 0:
        raise InvalidArgumentError("mask is empty")
    mean = float(vals.mean())
    if mean <= 0.0:
        return 0.0, math.inf
    return float(vals.min()) / mean, float(vals.std()) / mean


def is_non_uniform(
    magnitude: np.ndarray,
    mask: np.ndarray,
    min_ratio: float = DEFAULT_MIN_RATIO,
    max_cov: float = DEFAULT_MAX_COV,
) -> bool:
    """Criterion label: non-uniform iff min/mean < min_ratio or CoV > max_cov."""
    ratio, cov = uniformity_stats(magnitude, mask)
    return ratio < min_ratio or cov > max_cov


def magnitude_map(record: SliceRecord, weights: ShimWeights) -> np.ndarray:
    """Masked |combined field| for one record (zeros outside the mask)."""
    return np.abs(combine(record.field, weights)) * record.mask


def _corrupt(weights: ShimWeights, rng: np.random.Generator) -> ShimWeights:
    """Random phase scrambling, or zeroing 2-4 coils."""
    values = weights.values.copy()
    if rng.integers(2) == 0:
        values = values * np.exp(1j * rng.uniform(0.0, 2.0 * math.pi, values.size))
    else:
        k = int(rng.integers(2, min(5, values.size + 1)))
        values[rng.choice(values.size, size=k, replace=False)] = 0.0
    return ShimWeights(values=values)


def synth_labeled_set(
    dataset: Dataset,
    rng_seed: int,
    counts: tuple[int, int],
    min_ratio: float = DEFAULT_MIN_RATIO,
    max_cov: float = DEFAULT_MAX_COV,
    attempt_factor: int = 50,
) -> list[NfdSample]:
    """Balanced labeled maps from reference and corrupted weights.

    Uniform samples are reference-weight maps passing the criterion (at most
    one per record); non-uniform samples are corrupted-weight maps failing
    it. Every label is re-derivable from the map and criterion alone.

    Raises:
        GenerationShortfallError: a class cannot reach its requested count
            within ``attempt_factor`` times that many attempts.
    """
    n_uniform, n_non_uniform = counts
    if n_uniform < 0 or n_non_uniform < 0:
        raise InvalidArgumentError("counts must be >= 0")
    records = [r for r in dataset.records if r.ref_weights is not None]
    if not records:
        raise InvalidArgumentError("dataset has no records with reference weights")

    samples: list[NfdSample] = []
    produced = 0
    for record in records:
        if produced >= n_uniform:
            break
        mag = magnitude_map(record, record.ref_weights)
        if not is_non_uniform(mag, record.mask, min_ratio, max_cov):
            samples.append(NfdSample(mag, LABEL_UNIFORM, "solver_output"))
            produced += 1
    if produced < n_uniform:
        raise GenerationShortfallError(LABEL_UNIFORM, n_uniform, produced)

    rng = np.random.default_rng([np.uint64(rng_seed), np.uint64(1)])
    produced = 0
    attempts = 0
    budget = max(1, attempt_factor * n_non_uniform)
    while produced < n_non_uniform and attempts < budget:
        attempts += 1
        record = records[int(rng.integers(len(records)))]
        mag = magnitude_map(record, _corrupt(record.ref_weights, rng))
        if is_non_uniform(mag, record.mask, min_ratio, max_cov):
            samples.append(NfdSample(mag, LABEL_NON_UNIFORM, "corrupted_weights"))
            produced += 1
    if produced < n_non_uniform:
        raise GenerationShortfallError(LABEL_NON_UNIFORM, n_non_uniform, produced)
    return samples


def _normalize(magnitude: np.ndarray) -> np.ndarray:
    """Scale-invariant input: divide by the mean of the positive entries."""
    pos = magnitude[magnitude > 0]
    mean = float(pos.mean()) if pos.size else 1.0
    if mean <= 0:
        mean = 1.0
    return magnitude / mean


def _logits_values(model: NfdModel, batch: np.ndarray) -> np.ndarray:
    arrays = model.unflatten()
    h = batch
    idx = 0
    for _ in model.arch.widths:
        k, s, b = arrays[idx : idx + 3]
        idx += 3
        h = ad.conv2d_values(h, k, 2) * s[None, :, None, None] + b[None, :, None, None]
        h = np.maximum(h, 0.0)
    hw, hb = arrays[idx], arrays[idx + 1]
    return (h.reshape(h.shape[0], -1) @ hw.T + hb)[:, 0]


def _logits_tape(leaves: list[ad.TapeTensor], arch: NfdArch, batch: np.ndarray) -> ad.TapeTensor:
    h = ad.leaf(batch)
    idx = 0
    for _ in arch.widths:
        k, s, b = leaves[idx : idx + 3]
        idx += 3
        h = ad.relu(ad.affine_channel(ad.conv2d(h, k, 2), s, b))
    return ad.dense(ad.flatten(h), leaves[idx], leaves[idx + 1])


def classify(model: NfdModel, magnitude: np.ndarray) -> tuple[str, float]:
    """(label, confidence) for one map; confidence 1 means uniform."""
    if magnitude.shape != (model.arch.grid_size, model.arch.grid_size):
        raise InvalidArgumentError(
            f"map shape {magnitude.shape} does not match model grid "
            f"{model.arch.grid_size}"
        )
    x = _normalize(np.asarray(magnitude, dtype=np.float64))[None, None]
    logit = float(_logits_values(model, x)[0])
    confidence = float(np.clip(ad.sigmoid_values(np.asarray(logit)), _CONF_CLIP, 1.0 - _CONF_CLIP))
    label = LABEL_UNIFORM if confidence >= model.threshold else LABEL_NON_UNIFORM
    return label, confidence


@dataclass(frozen=True)
class NfdTrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 3e-3
    seed: int = 0
    widths: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise InvalidArgumentError("epochs >= 0, batch_size >= 1, lr > 0 required")


@dataclass
class NfdTrainHistory:
    """Per-epoch cross-entropy and training accuracy."""

    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy}


def train_nfd(
    samples: list[NfdSample], config: NfdTrainConfig = NfdTrainConfig()
) -> tuple[NfdModel, NfdTrainHistory]:
    """Seeded mini-batch Adam on binary cross-entropy (logit form).

    Requires both classes to be present. Returns the trained model and the
    per-epoch loss/accuracy history.
    """
    if not samples:
        raise InvalidArgumentError("no samples")
    labels = np.array([1.0 if s.label == LABEL_UNIFORM else 0.0 for s in samples])
    if labels.min() == labels.max():
        raise InvalidArgumentError("training set must contain both classes")
    grid = samples[0].magnitude.shape[0]
    x_all = np.stack([_normalize(s.magnitude.astype(np.float64)) for s in samples])[:, None]

    model = build_nfd(grid, widths=config.widths, seed=config.seed)
    history = NfdTrainHistory()
    if config.epochs == 0:
        return model, history
    rng = np.random.default_rng(np.uint64(config.seed))
    state = AdamState.fresh(model.params.size, lr=config.lr)
    n = len(samples)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = x_all[idx]
            y = labels[idx]
            leaves = [ad.leaf(a) for a in model.unflatten()]
            logits = _logits_tape(leaves, model.arch, batch)
            loss_node = _bce_with_logits(logits, y)
            ad.backward(loss_node, seed=np.asarray(1.0))
            grad = np.concatenate([lf.grad.ravel() for lf in leaves])
            state, new_params = adam_step(state, model.params, grad)
            if not np.all(np.isfinite(new_params)):
                raise InvalidArgumentError("non-finite NFD parameters; lower the lr")
            model.params = new_params
            probs = ad.sigmoid_values(logits.values[:, 0])
            correct += int(np.sum((probs >= 0.5) == (y == 1.0)))
            total_loss += float(loss_node.values) * len(idx)
        history.loss.append(total_loss / n)
        history.accuracy.append(correct / n)
    return model, history


def _bce_with_logits(logits: ad.TapeTensor, y: np.ndarray) -> ad.TapeTensor:
    """Mean of softplus(z) - y*z (stable binary cross-entropy)."""
    z = logits.values[:, 0]
    softplus = np.where(z > 30, z, np.log1p(np.exp(np.minimum(z, 30))))
    loss = float(np.mean(softplus - y * z))
    dz = (ad.sigmoid_values(z) - y) / z.size

    def pull(g):
        return (float(g) * dz)[:, None]

    return ad.TapeTensor(np.asarray(loss), parents=((logits, pull),))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with uniform as the positive class, plus mean confidences."""

    tp: int
    fp: int
    tn: int
    fn: int
    mean_confidence_uniform: float
    mean_confidence_non_uniform: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def uniform_accuracy(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else math.nan

    @property
    def non_uniform_accuracy(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else math.nan

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "accuracy": self.accuracy,
            "uniform_accuracy": self.uniform_accuracy,
            "non_uniform_accuracy": self.non_uniform_accuracy,
            "mean_confidence_uniform": self.mean_confidence_uniform,
            "mean_confidence_non_uniform": self.mean_confidence_non_uniform,
        }


def evaluate_nfd(model: NfdModel, samples: list[NfdSample]) -> ConfusionMatrix:
    """Confusion counts over a held-out labeled set."""
    if not samples:
        raise InvalidArgumentError("evaluation set is empty")
    tp = fp = tn = fn = 0
    conf_u: list[float] = []
    conf_n: list[float] = []
    for sample in samples:
        label, confidence = classify(model, sample.magnitude)
        if sample.label == LABEL_UNIFORM:
            conf_u.append(confidence)
            if label == LABEL_UNIFORM:
                tp += 1
            else:
                fn += 1
        else:
            conf_n.append(confidence)
            if label == LABEL_NON_UNIFORM:
                tn += 1
            else:
                fp += 1
    return ConfusionMatrix(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        mean_confidence_uniform=float(np.mean(conf_u)) if conf_u else math.nan,
        mean_confidence_non_uniform=float(np.mean(conf_n)) if conf_n else math.nan,
    )
