"""Monte Carlo dropout inference and sliding-window reconstruction.

T stochastic forward passes are split evenly across one or more training
checkpoints, with dropout kept on. For a full volume, every sample's
patch outputs are stitched first (uniform averaging over the overlap
coverage), and statistics are taken across the T stitched fields:

  regression  mean f1, parameter variance Var_T[f1] (population, 1/T),
              intrinsic variance mean_T[exp(s1)], total = intrinsic + param
  segmentation mean scaled-softmax probabilities (argmax -> labels),
              per-class parameter variance, intrinsic mean_T[exp(s2)]

The log-variance maps pass through the same [-10, 10] clamp the losses
apply, so sigma^2 means the same thing in training and prediction.

Segmentation intrinsic and parameter uncertainties live on different
scales (a logit temperature vs a probability variance) and are reported
separately, never summed. Variants without a variance head get intrinsic
zero; the homoscedastic variant broadcasts its scalar log-variances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import softmax
from .errors import ConfigError, NumericError
from .losses import S_CLAMP, scaled_softmax
from .model import DualTaskOutput, ModelConfig, forward, load_checkpoint
from .volume import Volume, as_intensity, as_label, as_variance, read_volume, write_volume

_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass
class StochasticPrediction:
    """Aggregated MC prediction for one volume; absent tasks are None."""

    reg_mean: np.ndarray | None = None
    reg_param_var: np.ndarray | None = None
    reg_intrinsic_var: np.ndarray | None = None
    reg_total_var: np.ndarray | None = None
    seg_mean_prob: np.ndarray | None = None
    seg_label: np.ndarray | None = None
    seg_param_var: np.ndarray | None = None
    seg_intrinsic: np.ndarray | None = None
    T: int = 0
    checkpoint_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class StitchPlan:
    """Overlapping patch tiling of a volume."""

    volume_shape: tuple[int, int]
    patch_size: tuple[int, int]
    stride: tuple[int, int]
    origins: tuple[tuple[int, int], ...]
    coverage: np.ndarray

    def validate(self) -> None:
        cov = np.zeros(self.volume_shape, dtype=np.int64)
        ph, pw = self.patch_size
        for r, c in self.origins:
            if r < 0 or c < 0 or r + ph > self.volume_shape[0] or \
                    c + pw > self.volume_shape[1]:
                raise ConfigError(f"patch origin {(r, c)} out of bounds")
            cov[r:r + ph, c:c + pw] += 1
        if (cov < 1).any():
            raise ConfigError("stitch plan leaves voxels uncovered")
        if not np.array_equal(cov, self.coverage):
            raise ConfigError("stitch plan coverage is inconsistent")


def _axis_starts(size: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, size - patch + 1, stride))
    last = size - patch
    if starts[-1] != last:
        starts.append(last)
    return starts


def plan_stitch(volume_shape, patch_size, stride) -> StitchPlan:
    """Regular origin grid with the trailing row/column clamped inward."""
    shape = tuple(int(s) for s in volume_shape)
    patch = (patch_size, patch_size) if np.isscalar(patch_size) else tuple(patch_size)
    strides = (stride, stride) if np.isscalar(stride) else tuple(stride)
    if len(shape) != 2:
        raise ConfigError(f"stitch planning expects a 2D shape, got {shape}")
    for sz, p, st in zip(shape, patch, strides):
        if p > sz:
            raise ConfigError(f"patch {patch} exceeds volume {shape}")
        if not (1 <= st <= p):
            raise ConfigError(f"stride {strides} must be in [1, patch size]")
    rows = _axis_starts(shape[0], patch[0], strides[0])
    cols = _axis_starts(shape[1], patch[1], strides[1])
    origins = tuple((r, c) for r in rows for c in cols)
    coverage = np.zeros(shape, dtype=np.int64)
    for r, c in origins:
        coverage[r:r + patch[0], c:c + patch[1]] += 1
    return StitchPlan(shape, patch, strides, origins, coverage)


def sample_seed(seed: int, checkpoint_index: int, sample_index: int) -> int:
    ss = np.random.SeedSequence(
        [seed & _MASK64, checkpoint_index, sample_index, 0x6D63])
    return int(ss.generate_state(1, np.uint64)[0])


def _load_checkpoints(checkpoints):
    """Accept base paths or preloaded (params, config, id) triples."""
    loaded = []
    for i, ck in enumerate(checkpoints):
        if isinstance(ck, tuple):
            loaded.append(ck)
            continue
        params, config, iteration, _ = load_checkpoint(ck)
        loaded.append((params, config, f"ckpt_{iteration:06d}"))
    if not loaded:
        raise ConfigError("need at least one checkpoint")
    first = loaded[0][1]
    for params, config, cid in loaded[1:]:
        if config != first:
            raise ConfigError(f"checkpoint {cid} config differs from the first")
    return loaded


def mc_forward_samples(checkpoints, patch: np.ndarray, T: int,
                       seed: int) -> list[DualTaskOutput]:
    """T dropout samples of one (already normalized) patch.

    Samples are split evenly across checkpoints; sample seeds derive from
    (seed, checkpoint index, sample index).
    """
    loaded = _load_checkpoints(checkpoints)
    k = len(loaded)
    if T < 2:
        raise ConfigError(f"need T >= 2 samples, got {T}")
    if T % k:
        raise ConfigError(f"T={T} not divisible by {k} checkpoints")
    per = T // k
    outs = []
    for ci, (params, config, _) in enumerate(loaded):
        for si in range(per):
            outs.append(forward(params, config, patch, mode="mc_sample",
                                rng_seed=sample_seed(seed, ci, si)))
    return outs


def aggregate_regression(reg_means: np.ndarray, intrinsic_vars=None):
    """Across-sample stats for stacked regression fields (T, ...).

    Returns (mean, param_var, intrinsic_var, total_var); variance is the
    population variance over the sample axis. ``intrinsic_vars`` holds the
    per-sample exp(s1) fields, or None for variants without the head.
    """
    stack = np.asarray(reg_means, dtype=np.float64)
    if stack.ndim < 1 or stack.shape[0] < 2:
        raise ConfigError("regression aggregation needs >= 2 samples")
    mean = stack.mean(axis=0)
    param = stack.var(axis=0)
    if intrinsic_vars is None:
        intrinsic = np.zeros_like(mean)
    else:
        intrinsic = np.asarray(intrinsic_vars, dtype=np.float64).mean(axis=0)
    return mean, param, intrinsic, intrinsic + param


def aggregate_segmentation(probs: np.ndarray, intrinsic=None):
    """Across-sample stats for stacked probability fields (T, C, ...).

    Returns (mean_prob, label, param_var, intrinsic_mean); ties in the
    mean probabilities resolve to the lowest class index.
    """
    stack = np.asarray(probs, dtype=np.float64)
    if stack.ndim < 2 or stack.shape[0] < 2:
        raise ConfigError("segmentation aggregation needs >= 2 samples")
    mean_prob = stack.mean(axis=0)
    label = mean_prob.argmax(axis=0).astype(np.uint8)
    param = stack.var(axis=0)
    if intrinsic is None:
        intrinsic_mean = np.zeros(mean_prob.shape[1:])
    else:
        intrinsic_mean = np.asarray(intrinsic, dtype=np.float64).mean(axis=0)
    return mean_prob, label, param, intrinsic_mean


def _clamped_logvar(s) -> np.ndarray:
    # The likelihood defines sigma^2 through the clamped log-variance, so
    # prediction must exponentiate the same quantity; without the clamp a
    # single dropout excursion of the head dominates every variance mean.
    return np.clip(np.asarray(s, dtype=np.float64), -S_CLAMP, S_CLAMP)


def _sample_fields(out: DualTaskOutput, params: dict, config: ModelConfig):
    """Per-sample fields entering the stitch: f1, exp(s1), probs, exp(s2)."""
    fields = {}
    if out.reg_mean is not None:
        fields["f1"] = np.asarray(out.reg_mean, dtype=np.float64)
        if out.reg_logvar is not None:
            fields["iv"] = np.exp(_clamped_logvar(out.reg_logvar))
        elif config.scalar_logvars:
            fields["iv"] = np.full(out.reg_mean.shape,
                                   float(np.exp(_clamped_logvar(np.float64(params["s1"])))))
    if out.seg_logits is not None:
        if out.seg_logvar is not None:
            s2 = _clamped_logvar(out.seg_logvar)
        elif config.scalar_logvars:
            s2 = np.full(out.seg_logits.shape[-2:],
                         float(_clamped_logvar(np.float64(params["s2"]))))
        else:
            s2 = None
        if s2 is None:
            # No variance head: report plain softmax probabilities.
            fields["probs"] = softmax(np.asarray(out.seg_logits, dtype=np.float64),
                                      axis=-3)
        else:
            fields["probs"] = scaled_softmax(out.seg_logits, s2)
            fields["si"] = np.exp(s2)
    return fields


def predict_patch(checkpoints, patch: np.ndarray, T: int,
                  seed: int) -> StochasticPrediction:
    """MC prediction of a single patch without stitching."""
    loaded = _load_checkpoints(checkpoints)
    samples = mc_forward_samples(loaded, patch, T, seed)
    config = loaded[0][1]
    stacks: dict[str, list] = {}
    for ci in range(len(loaded)):
        params = loaded[ci][0]
        per = T // len(loaded)
        for si in range(per):
            out = samples[ci * per + si]
            for key, val in _sample_fields(out, params, config).items():
                stacks.setdefault(key, []).append(val)
    return _aggregate_stacks(stacks, T, tuple(c[2] for c in loaded))


def _aggregate_stacks(stacks: dict, T: int, ckpt_ids) -> StochasticPrediction:
    pred = StochasticPrediction(T=T, checkpoint_ids=tuple(ckpt_ids))
    if "f1" in stacks:
        iv = stacks.get("iv")
        mean, param, intr, total = aggregate_regression(
            np.stack(stacks["f1"]), np.stack(iv) if iv else None)
        pred.reg_mean, pred.reg_param_var = mean, param
        pred.reg_intrinsic_var, pred.reg_total_var = intr, total
    if "probs" in stacks:
        si = stacks.get("si")
        mp, label, pv, im = aggregate_segmentation(
            np.stack(stacks["probs"]), np.stack(si) if si else None)
        pred.seg_mean_prob, pred.seg_label = mp, label
        pred.seg_param_var, pred.seg_intrinsic = pv, im
    return pred


def sliding_window_predict(checkpoints, volume, plan: StitchPlan, T: int,
                           seed: int, input_offset: float = 0.0,
                           input_scale: float = 0.01) -> StochasticPrediction:
    """Full-volume MC prediction: stitch each sample, then aggregate.

    ``volume`` is a 2D Volume or array of raw input intensities; the same
    normalization used in training must be supplied. Each sample reuses
    one dropout mask across all patches (one thinned network per sample).
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.ndim != 2:
        raise ConfigError(f"sliding window expects a 2D volume, got {data.shape}")
    if tuple(data.shape) != plan.volume_shape:
        raise ConfigError(f"plan is for shape {plan.volume_shape}, "
                          f"volume is {data.shape}")
    plan.validate()
    loaded = _load_checkpoints(checkpoints)
    config = loaded[0][1]
    k = len(loaded)
    if T < 2:
        raise ConfigError(f"need T >= 2 samples, got {T}")
    if T % k:
        raise ConfigError(f"T={T} not divisible by {k} checkpoints")
    per = T // k

    ph, pw = plan.patch_size
    cov = plan.coverage.astype(np.float64)
    stacks: dict[str, list] = {}
    for ci, (params, cfg, _) in enumerate(loaded):
        for si in range(per):
            rng_seed = sample_seed(seed, ci, si)
            acc: dict[str, np.ndarray] = {}
            for r, c in plan.origins:
                patch = data[r:r + ph, c:c + pw]
                xn = ((patch - input_offset) * input_scale).astype(np.float32)
                out = forward(params, cfg, xn, mode="mc_sample", rng_seed=rng_seed)
                for key, val in _sample_fields(out, params, cfg).items():
                    if key not in acc:
                        shape = val.shape[:-2] + plan.volume_shape
                        acc[key] = np.zeros(shape, dtype=np.float64)
                    acc[key][..., r:r + ph, c:c + pw] += val
            for key, total in acc.items():
                stacks.setdefault(key, []).append(total / cov)
    return _aggregate_stacks(stacks, T, tuple(c[2] for c in loaded))


_FIELD_WRITERS = {
    "reg_mean": as_intensity,
    "reg_param_var": as_variance,
    "reg_intrinsic_var": as_variance,
    "reg_total_var": as_variance,
    "seg_mean_prob": as_intensity,
    "seg_param_var": as_variance,
    "seg_intrinsic": as_variance,
}


def save_prediction(pred: StochasticPrediction, out_dir, case_id: str,
                    spacing=None) -> Path:
    """Write prediction fields as volume files plus a JSON index.

    3D fields (class-channel maps) are stored with a unit-spacing leading
    axis. Returns the index path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, ctor in _FIELD_WRITERS.items():
        arr = getattr(pred, name)
        if arr is None:
            continue
        sp = spacing if spacing is not None else (1.0,) * arr.ndim
        if len(sp) == arr.ndim - 1:
            sp = (1.0,) + tuple(sp)
        fname = f"{case_id}_{name}.bin"
        write_volume(ctor(arr, sp), out / fname)
        files[name] = fname
    if pred.seg_label is not None:
        sp = spacing if spacing is not None else (1.0,) * pred.seg_label.ndim
        fname = f"{case_id}_seg_label.bin"
        write_volume(as_label(pred.seg_label, sp), out / fname)
        files["seg_label"] = fname
    index = {"case_id": case_id, "T": pred.T,
             "checkpoint_ids": list(pred.checkpoint_ids), "files": files}
    index_path = out / f"{case_id}_prediction.json"
    index_path.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
    return index_path


def load_prediction(index_path) -> StochasticPrediction:
    path = Path(index_path)
    index = json.loads(path.read_text())
    pred = StochasticPrediction(T=int(index["T"]),
                                checkpoint_ids=tuple(index["checkpoint_ids"]))
    for name, fname in index["files"].items():
        vol = read_volume(path.parent / fname)
        data = vol.data.astype(np.float64) if name != "seg_label" else vol.data
        setattr(pred, name, data)
    if pred.reg_total_var is not None and pred.reg_intrinsic_var is not None \
            and pred.reg_param_var is not None:
        if not np.allclose(pred.reg_total_var,
                           pred.reg_intrinsic_var + pred.reg_param_var,
                           rtol=1e-5, atol=1e-6):
            raise NumericError(f"total variance additivity violated in {path}")
    return pred
