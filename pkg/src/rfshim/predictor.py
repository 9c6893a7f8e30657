"""Learned shim predictor: a small residual regressor from masked
multi-channel fields to coil weights, trained by matching the RMSE of the
predicted weights to the RMSE of the reference weights.

The training loss for a batch of slices is::

    mean_i | RMSE(predicted weights_i) - RMSE(reference weights_i) |

where the predicted RMSE is differentiated end to end through the network,
the field combination, and the guarded magnitude. Weight-space regression is
deliberately absent: the objective is invariant to a global phase, so weight
targets are not unique.

Input encoding: one real and one imaginary plane per channel (2C planes),
multiplied by the mask and scaled so the 99th-percentile masked magnitude
maps to 1. Training runs in float64 on the tape engine; deployed inference
(:func:`predict`, :func:`predict_batch`) uses a float32 fast path without
tape overhead.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgumentError
from .fields import Dataset, SliceRecord
from .objective import ShimWeights, masked_columns
from .solvers import AdamState, adam_step

MODEL_VERSION = 1


@dataclass(frozen=True)
class PredictorArch:
    """Architecture descriptor: stem conv, four stride-2 residual stages,
    global pooling, and a dense head emitting 2C reals."""

    input_channels: int
    grid_size: int
    width_base: int
    blocks_per_stage: int = 2
    output_count: int = 0

    def __post_init__(self):
        if self.input_channels < 2 or self.input_channels % 2 != 0:
            raise InvalidArgumentError("input_channels must be an even count >= 2")
        if self.grid_size < 16:
            raise InvalidArgumentError(
                "grid_size must be >= 16 to survive four stride-2 stages"
            )
        if self.width_base < 1 or self.blocks_per_stage < 1:
            raise InvalidArgumentError("width_base and blocks_per_stage must be >= 1")
        if self.output_count < 1:
            raise InvalidArgumentError("output_count must be >= 1")

    @property
    def stage_widths(self) -> tuple[int, int, int, int]:
        return tuple(self.width_base * m for m in (1, 2, 4, 8))


def _parameter_layout(arch: PredictorArch) -> list[tuple[str, tuple[int, ...]]]:
    """Fixed (name, shape) order backing the flat parameter vector."""
    layout = [
        ("stem.conv", (arch.width_base, arch.input_channels, 3, 3)),
        ("stem.scale", (arch.width_base,)),
        ("stem.bias", (arch.width_base,)),
    ]
    in_ch = arch.width_base
    for stage, width in enumerate(arch.stage_widths):
        for block in range(arch.blocks_per_stage):
            prefix = f"s{stage}.b{block}"
            layout += [
                (f"{prefix}.conv1", (width, in_ch, 3, 3)),
                (f"{prefix}.scale1", (width,)),
                (f"{prefix}.bias1", (width,)),
                (f"{prefix}.conv2", (width, width, 3, 3)),
                (f"{prefix}.scale2", (width,)),
                (f"{prefix}.bias2", (width,)),
            ]
            if block == 0:
                layout.append((f"{prefix}.proj", (width, in_ch, 1, 1)))
            in_ch = width
    layout += [
        ("head.weight", (arch.output_count, in_ch)),
        ("head.bias", (arch.output_count,)),
    ]
    return layout


def parameter_count(arch: PredictorArch) -> int:
    return sum(int(np.prod(shape)) for _, shape in _parameter_layout(arch))


@dataclass
class PredictorModel:
    """Architecture descriptor plus one flat float64 parameter vector."""

    arch: PredictorArch
    params: np.ndarray
    version: int = MODEL_VERSION
    _folded_cache: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (parameter_count(self.arch),):
            raise InvalidArgumentError(
                f"flat parameter vector must have {parameter_count(self.arch)} "
                f"entries, got {self.params.shape}"
            )

    @property
    def param_count(self) -> int:
        return self.params.size

    def unflatten(self, dtype=np.float64) -> list[np.ndarray]:
        """Split the flat vector into per-layer arrays (copies)."""
        arrays = []
        offset = 0
        for _, shape in _parameter_layout(self.arch):
            size = int(np.prod(shape))
            arrays.append(
                self.params[offset : offset + size].reshape(shape).astype(dtype)
            )
            offset += size
        return arrays

    def folded_arrays(self) -> list:
        """Cached float32 inference weights with affines folded into convs."""
        if self._folded_cache is None:
            self._folded_cache = _fold_for_inference(self.arch, self.unflatten())
        return self._folded_cache

    def invalidate_cache(self) -> None:
        self._folded_cache = None


def build_predictor(
    input_channels: int,
    grid_size: int,
    width_base: int,
    seed: int = 0,
) -> PredictorModel:
    """Initialize a predictor for 2C input planes and 2C output weights.

    Convolutions use He-scaled normal draws, affines start at identity, and
    the head bias starts at the quadrature weights so an untrained model
    already emits a physically sane shim.
    """
    arch = PredictorArch(
        input_channels=input_channels,
        grid_size=grid_size,
        width_base=width_base,
        output_count=input_channels,
    )
    from .objective import quadrature_weights

    rng = np.random.default_rng([np.uint64(seed), np.uint64(0xD1C7)])
    chunks = []
    for name, shape in _parameter_layout(arch):
        if name.endswith((".conv", ".conv1", ".conv2", ".proj")):
            fan_in = int(np.prod(shape[1:]))
            chunks.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).ravel())
        elif name.endswith((".scale1", ".scale2")) or name == "stem.scale":
            chunks.append(np.ones(shape).ravel())
        elif name == "head.weight":
            fan_in = shape[1]
            chunks.append(rng.normal(0.0, 0.1 / math.sqrt(fan_in), size=shape).ravel())
        elif name == "head.bias":
            chunks.append(quadrature_weights(arch.output_count // 2).to_real())
        else:  # conv-affine and head biases
            chunks.append(np.zeros(shape).ravel())
    return PredictorModel(arch=arch, params=np.concatenate(chunks))


def _masked_p99(grids: np.ndarray, mask_flat: np.ndarray) -> float:
    """99th percentile of the masked channel magnitudes (linear interpolation,
    like np.percentile, but via partition instead of a full sort)."""
    c = grids.shape[0]
    mags = np.abs(grids.reshape(c, -1).take(mask_flat, axis=1)).ravel()
    if not mags.size:
        return 0.0
    pos = 0.99 * (mags.size - 1)
    lo = int(pos)
    part = np.partition(mags, (lo, min(lo + 1, mags.size - 1)))
    if lo == mags.size - 1:
        return float(part[lo])
    return float(part[lo] + (pos - lo) * (part[lo + 1] - part[lo]))


def encode_record(record: SliceRecord, dtype=np.float64) -> np.ndarray:
    """(2C, N, N) input planes: masked Re/Im per channel, scaled so the 99th
    percentile of the masked magnitude is 1."""
    grids = record.field.grids
    p99 = _masked_p99(grids, np.flatnonzero(record.mask.ravel()))
    scale = 1.0 / p99 if p99 > 1e-30 else 1.0
    planes = np.empty((2 * grids.shape[0],) + grids.shape[1:], dtype=dtype)
    masked_scale = (scale * record.mask).astype(dtype)
    np.multiply(grids.real, masked_scale, out=planes[: grids.shape[0]])
    np.multiply(grids.imag, masked_scale, out=planes[grids.shape[0] :])
    return planes


def encode_batch(records: list[SliceRecord]) -> np.ndarray:
    """(2C, B, N, N) float32 planes in the layout the folded forward uses."""
    first = records[0]
    c = first.field.n_channels
    n = first.field.grid_size
    out = np.empty((2 * c, len(records), n, n), dtype=np.float32)
    for i, record in enumerate(records):
        grids = record.field.grids
        if grids.shape != (c, n, n):
            raise InvalidArgumentError("records in a batch must share dimensions")
        p99 = _masked_p99(grids, np.flatnonzero(record.mask.ravel()))
        scale = 1.0 / p99 if p99 > 1e-30 else 1.0
        masked_scale = (scale * record.mask).astype(np.float32)
        np.multiply(grids.real, masked_scale, out=out[:c, i])
        np.multiply(grids.imag, masked_scale, out=out[c:, i])
    return out


def _forward_arrays(arch: PredictorArch, arrays: list, x, ops) -> object:
    """Shared forward pass; ``ops`` supplies either tape or plain-array ops."""
    conv2d, relu, add, affine = ops
    it = iter(arrays)

    def take(n):
        return [next(it) for _ in range(n)]

    stem_k, stem_s, stem_b = take(3)
    h = relu(affine(conv2d(x, stem_k, 1), stem_s, stem_b))
    for _stage in range(4):
        for block in range(arch.blocks_per_stage):
            stride = 2 if block == 0 else 1
            k1, s1, b1, k2, s2, b2 = take(6)
            y = relu(affine(conv2d(h, k1, stride), s1, b1))
            y = affine(conv2d(y, k2, 1), s2, b2)
            if block == 0:
                (proj,) = take(1)
                shortcut = conv2d(h, proj, stride)
            else:
                shortcut = h
            h = relu(add(y, shortcut))
    return h, take(2)


_TAPE_OPS = (ad.conv2d, ad.relu, ad.add, ad.affine_channel)


def _fold_for_inference(arch: PredictorArch, arrays: list) -> list:
    """Fold every conv-affine pair into (scaled kernels, bias), float32.

    Standard deployment folding: ``scale * conv(x, K) + bias`` equals
    ``conv(x, scale[:, None, None, None] * K) + bias``. Returns the folded
    per-layer weights in forward order, ending with the dense head.
    """
    it = iter(arrays)

    def fold_conv():
        k, s, b = next(it), next(it), next(it)
        return (
            (k * s[:, None, None, None]).astype(np.float32),
            b.astype(np.float32),
        )

    folded = [fold_conv()]  # stem
    for _stage in range(4):
        for block in range(arch.blocks_per_stage):
            entry = [fold_conv(), fold_conv()]
            if block == 0:
                proj = next(it)
                entry.append((proj.astype(np.float32), None))
            folded.append(entry)
    hw, hb = next(it), next(it)
    folded.append((hw.astype(np.float32), hb.astype(np.float32)))
    return folded


def _conv_cbhw(x: np.ndarray, kernels: np.ndarray, bias, stride: int) -> np.ndarray:
    """Convolution in (channels, batch, H, W) layout with fused bias.

    The layout keeps every partial product contiguous, so no transposes are
    needed anywhere in the folded inference pipeline.
    """
    cin, b, h, w = x.shape
    cout, _, kh, kw = kernels.shape
    pad = kh // 2
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (w + 2 * pad - kw) // stride + 1
    if pad:
        xp = np.zeros((cin, b, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    if bias is None:
        acc = np.zeros((cout, b, hout, wout), dtype=x.dtype)
    else:
        acc = np.empty((cout, b, hout, wout), dtype=x.dtype)
        acc[:] = bias[:, None, None, None]
    for dy in range(kh):
        for dx in range(kw):
            sl = xp[
                :, :, dy : dy + stride * (hout - 1) + 1 : stride,
                dx : dx + stride * (wout - 1) + 1 : stride,
            ]
            acc += np.tensordot(kernels[:, :, dy, dx], sl, axes=(1, 0))
    return acc


def _forward_folded(model: PredictorModel, x_cbhw: np.ndarray) -> np.ndarray:
    """Folded float32 forward in CBHW layout: (2C, B, N, N) -> (B, 2C)."""
    folded = model.folded_arrays()
    (stem_k, stem_b) = folded[0]
    h = np.maximum(_conv_cbhw(x_cbhw, stem_k, stem_b, 1), 0.0)
    idx = 1
    for _stage in range(4):
        for block in range(model.arch.blocks_per_stage):
            entry = folded[idx]
            idx += 1
            stride = 2 if block == 0 else 1
            (k1, b1), (k2, b2) = entry[0], entry[1]
            y = np.maximum(_conv_cbhw(h, k1, b1, stride), 0.0)
            y = _conv_cbhw(y, k2, b2, 1)
            if block == 0:
                proj_k, _ = entry[2]
                y += _conv_cbhw(h, proj_k, None, stride)
            else:
                y += h
            h = np.maximum(y, 0.0)
    hw, hb = folded[-1]
    pooled = h.mean(axis=(2, 3))  # (C, B)
    return (hw @ pooled + hb[:, None]).T


def forward_values(model: PredictorModel, batch: np.ndarray) -> np.ndarray:
    """Float32 inference forward: (B, 2C, N, N) -> (B, 2C)."""
    _check_batch(model.arch, batch)
    x = np.ascontiguousarray(
        np.asarray(batch, dtype=np.float32).transpose(1, 0, 2, 3)
    )
    return _forward_folded(model, x)


def forward_tape(
    model_leaves: list[ad.TapeTensor], arch: PredictorArch, batch: np.ndarray
) -> ad.TapeTensor:
    """Float64 training forward returning the (B, 2C) output node."""
    _check_batch(arch, batch)
    x = ad.leaf(batch)
    h, (hw, hb) = _forward_arrays(arch, model_leaves, x, _TAPE_OPS)
    return ad.dense(ad.global_avg_pool(h), hw, hb)


def _check_batch(arch: PredictorArch, batch: np.ndarray) -> None:
    if batch.ndim != 4 or batch.shape[1] != arch.input_channels or \
            batch.shape[2] != arch.grid_size or batch.shape[3] != arch.grid_size:
        raise InvalidArgumentError(
            f"batch shape {batch.shape} does not match model input "
            f"({arch.input_channels}, {arch.grid_size}, {arch.grid_size})"
        )


def make_leaves(model: PredictorModel) -> list[ad.TapeTensor]:
    """Per-layer parameter leaves for one training step."""
    return [ad.leaf(a) for a in model.unflatten()]


def collect_grads(leaves: list[ad.TapeTensor]) -> np.ndarray:
    return np.concatenate([lf.grad.ravel() for lf in leaves])


def predict(model: PredictorModel, record: SliceRecord) -> ShimWeights:
    """Shim weights for one slice; deterministic, no inner optimization."""
    x = encode_record(record, np.float32)[:, None]
    _check_batch(model.arch, x.transpose(1, 0, 2, 3))
    out = _forward_folded(model, x)
    values = out[0].astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError("model produced non-finite weights")
    return ShimWeights.from_real(values)


def predict_timed(model: PredictorModel, record: SliceRecord) -> tuple[ShimWeights, float]:
    """:func:`predict` plus the wall time of the forward pass."""
    t0 = time.perf_counter()
    weights = predict(model, record)
    return weights, time.perf_counter() - t0


def predict_batch(model: PredictorModel, records: list[SliceRecord]) -> list[ShimWeights]:
    """Batched inference over many slices (the volume-processing path)."""
    if not records:
        return []
    x = encode_batch(records)
    _check_batch(model.arch, x.transpose(1, 0, 2, 3))
    out = _forward_folded(model, x).astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise InvalidArgumentError("model produced non-finite weights")
    return [ShimWeights.from_real(row) for row in out]


def rmse_node(
    weights: ad.TapeTensor, records: list[SliceRecord], epsilon_mag: float = 1e-12
) -> ad.TapeTensor:
    """Per-slice RMSE (% of target) of predicted weights, differentiable.

    Forward matches :func:`rfshim.objective.rmse_percent`; the backward pass
    routes through the guarded magnitude derivative, exactly like the
    analytic solver gradient.
    """
    if weights.values.ndim != 2 or weights.values.shape[0] != len(records):
        raise InvalidArgumentError("weights must be (n_records, 2C)")
    systems = [masked_columns(r.field, r.mask) for r in records]
    targets = [r.target[r.mask].astype(np.float64) for r in records]
    c = systems[0].shape[1]
    if weights.values.shape[1] != 2 * c:
        raise InvalidArgumentError("weight width must equal 2 x channel count")

    out = np.empty(len(records))
    cached = []
    for i, (a, m) in enumerate(zip(systems, targets)):
        theta = weights.values[i]
        b = theta[:c] + 1j * theta[c:]
        s = a @ b
        r = np.abs(s)
        g = float((r - m) @ (r - m))
        out[i] = 100.0 * math.sqrt(max(g, 0.0) / m.size)
        cached.append((s, r, g))

    def pull(gout):
        grad = np.zeros_like(weights.values)
        for i, (a, m) in enumerate(zip(systems, targets)):
            s, r, g = cached[i]
            root = math.sqrt(max(g, 1e-300) * m.size)
            direction = s / np.maximum(r, epsilon_mag)
            cg = a.conj().T @ ((r - m) * direction)
            drmse = (100.0 / root) * np.concatenate([cg.real, cg.imag])
            grad[i] = gout[i] * drmse
        return grad

    return ad.TapeTensor(out, parents=((weights, pull),))


def rmse_match_loss(
    records: list[SliceRecord],
    model_leaves: list[ad.TapeTensor],
    arch: PredictorArch,
    batch: np.ndarray | None = None,
) -> ad.TapeTensor:
    """Scalar node: mean absolute gap between predicted and reference RMSE.

    Every record must carry a reference RMSE. The subgradient at a zero gap
    is taken as 0.
    """
    refs = []
    for r in records:
        if r.ref_rmse_percent is None:
            raise InvalidArgumentError(f"record {r.slice_id} has no reference RMSE")
        refs.append(r.ref_rmse_percent)
    refs = np.asarray(refs)
    if batch is None:
        batch = np.stack([encode_record(r) for r in records])
    pred = rmse_node(forward_tape(model_leaves, arch, batch), records)
    diff = pred.values - refs
    loss = float(np.mean(np.abs(diff)))
    sign = np.sign(diff) / len(records)
    return ad.TapeTensor(np.asarray(loss), parents=((pred, lambda g: float(g) * sign),))


def batch_loss_and_grad(
    records: list[SliceRecord],
    model: PredictorModel,
    batch: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Loss value and flat parameter gradient for one mini-batch."""
    leaves = make_leaves(model)
    loss = rmse_match_loss(records, leaves, model.arch, batch)
    ad.backward(loss, seed=np.asarray(1.0))
    return float(loss.values), collect_grads(leaves)


def evaluate_loss(records: list[SliceRecord], model: PredictorModel) -> float:
    """Forward-only mean RMSE gap (used for validation tracking)."""
    refs = np.asarray([r.ref_rmse_percent for r in records], dtype=np.float64)
    if np.any(np.isnan(refs)):
        raise InvalidArgumentError("validation records must carry reference RMSE")
    out = forward_values(model, np.stack([encode_record(r, np.float32) for r in records]))
    from .objective import rmse_percent

    preds = np.empty(len(records))
    for i, r in enumerate(records):
        preds[i] = rmse_percent(
            r.field, ShimWeights.from_real(out[i].astype(np.float64)), r.mask, r.target
        )
    return float(np.mean(np.abs(preds - refs)))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule: Adam at ``lr`` halved every ``lr_decay_every``
    epochs, seeded shuffling, 8:1:1 split convention."""

    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 50
    seed: int = 0
    width_base: int = 8
    split_ratio: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise InvalidArgumentError("epochs >= 0, batch_size >= 1, lr > 0 required")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise InvalidArgumentError("lr_decay in (0, 1], lr_decay_every >= 1 required")
        if abs(sum(self.split_ratio) - 1.0) > 1e-9:
            raise InvalidArgumentError("split_ratio must sum to 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class TrainHistory:
    """Per-epoch training curves."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "learning_rate": self.learning_rate,
            "epoch_seconds": self.epoch_seconds,
        }


def train(dataset: Dataset, config: TrainConfig) -> tuple[PredictorModel, TrainHistory]:
    """Mini-batch Adam on the RMSE-matching loss.

    Shuffling, initialization, and updates are all seeded, so identical
    (dataset, config) pairs reproduce identical parameters and history. The
    returned model is the best-validation checkpoint (final parameters when
    the validation split is empty).
    """
    train_records = dataset.subset("train")
    val_records = [r for r in dataset.subset("val") if r.ref_rmse_percent is not None]
    train_records = [r for r in train_records if r.ref_rmse_percent is not None]
    if config.epochs > 0 and not train_records:
        raise InvalidArgumentError("training split is empty (or lacks references)")

    sample = train_records[0] if train_records else dataset.records[0]
    n_channels = sample.field.n_channels
    model = build_predictor(
        2 * n_channels, sample.field.grid_size, config.width_base, seed=config.seed
    )
    history = TrainHistory()
    if config.epochs == 0:
        return model, history

    encoded = {r.slice_id: encode_record(r) for r in train_records}
    rng = np.random.default_rng(np.uint64(config.seed))
    state = AdamState.fresh(model.param_count, lr=config.lr)
    best_params = model.params.copy()
    best_val = math.inf
    n = len(train_records)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr_e = config.lr_at(epoch)
        state = replace(state, lr=lr_e)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            records = [train_records[i] for i in idx]
            batch = np.stack([encoded[r.slice_id] for r in records])
            loss, grad = batch_loss_and_grad(records, model, batch)
            state, new_params = adam_step(state, model.params, grad)
            if not np.all(np.isfinite(new_params)):
                raise InvalidArgumentError(
                    f"non-finite parameters after epoch {epoch}; lower the learning rate"
                )
            model.params = new_params
            model.invalidate_cache()
            total += loss * len(records)
        train_loss = total / n
        val_loss = evaluate_loss(val_records, model) if val_records else math.nan
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.learning_rate.append(lr_e)
        history.epoch_seconds.append(time.perf_counter() - t0)
        score = val_loss if val_records else train_loss
        if score < best_val:
            best_val = score
            best_params = model.params.copy()
    model.params = best_params
    model.invalidate_cache()
    return model, history
