"""Task likelihood losses with per-voxel uncertainty weighting.

Regression: L1(x) = 0.5 * exp(-s1) * (y1 - f1)^2 + s1, with s1 = log
sigma1^2. Classification uses the scaled-softmax approximation
L2(x) = 0.5 * exp(-s2) * CE(f2, y2) + s2, where CE is cross-entropy on the
unscaled logits. The joint loss is their sum of voxel means, so each task
term is weighted per voxel by its own predicted variance; the homoscedastic
variant replaces the s maps with two learnable scalars.

The log-variance is clamped to [-10, 10] inside every loss for early-phase
stability; the clamp must be slack at convergence. All ops accept graph
tensors or plain arrays and return graph tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError

S_CLAMP = 10.0


@dataclass
class LossBreakdown:
    """Scalar summary of one loss evaluation (plain floats)."""

    reg_data_term: float = 0.0
    reg_log_term: float = 0.0
    seg_data_term: float = 0.0
    seg_log_term: float = 0.0
    total: float = 0.0

    def fields(self) -> tuple[float, float, float, float, float]:
        return (self.reg_data_term, self.reg_log_term,
                self.seg_data_term, self.seg_log_term, self.total)


def _tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x))


def _require_finite(name: str, t: ad.Tensor) -> None:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values in {name}")


def _clamped(s: ad.Tensor) -> ad.Tensor:
    return ad.clip(s, -S_CLAMP, S_CLAMP)


def regression_nll(y1, reg_mean, reg_logvar):
    """Per-voxel heteroscedastic regression loss and its mean.

    Returns (map, mean) as graph tensors. ``reg_logvar`` may be a scalar
    (homoscedastic) or a map matching ``reg_mean``.
    """
    y = _tensor(y1)
    f = _tensor(reg_mean)
    s = _tensor(reg_logvar)
    if y.shape != f.shape:
        raise NumericError(f"target shape {y.shape} != prediction shape {f.shape}")
    if s.shape not in ((), f.shape):
        raise NumericError(f"logvar shape {s.shape} incompatible with {f.shape}")
    for name, t in (("target", y), ("prediction", f), ("logvar", s)):
        _require_finite(name, t)
    sc = _clamped(s)
    r = y - f
    loss_map = 0.5 * (ad.texp(-sc) * (r * r)) + sc
    return loss_map, ad.tmean(loss_map)


def scaled_softmax(seg_logits: np.ndarray, seg_logvar) -> np.ndarray:
    """Class probabilities softmax(f2 / (2 sigma2^2)); plain numpy.

    ``seg_logits`` is (..., C, H, W) with the class axis third from the
    end; ``seg_logvar`` is broadcastable against the logits without the
    class axis (commonly (H, W) or a scalar).
    """
    logits = np.asarray(seg_logits, dtype=np.float64)
    s = np.asarray(seg_logvar, dtype=np.float64)
    if not (np.isfinite(logits).all() and np.isfinite(s).all()):
        raise NumericError("non-finite values in scaled softmax inputs")
    if logits.ndim < 3:
        raise NumericError(f"logits need shape (..., C, H, W), got {logits.shape}")
    divisor = 2.0 * np.exp(s)
    scaled = logits / np.expand_dims(divisor, axis=-3) if s.ndim else logits / divisor
    return ad.softmax(scaled, axis=-3)


def classification_nll(seg_logits, seg_logvar, y2):
    """Per-voxel approximate classification loss and its mean.

    CE is evaluated on the unscaled logits, then weighted by
    0.5 * exp(-s2) with the log term added. Returns (map, mean).
    """
    logits = _tensor(seg_logits)
    s = _tensor(seg_logvar)
    labels = np.asarray(y2)
    if not np.issubdtype(labels.dtype, np.integer):
        raise NumericError(f"labels must be integers, got dtype {labels.dtype}")
    _require_finite("logits", logits)
    _require_finite("logvar", s)

    batched = logits.data.ndim == 4
    if logits.data.ndim not in (3, 4):
        raise NumericError(f"logits need shape (N, C, H, W) or (C, H, W), "
                           f"got {logits.shape}")
    if batched:
        want = logits.shape[:1] + logits.shape[2:]
    else:
        want = logits.shape[1:]
    if labels.shape != want:
        raise NumericError(f"label shape {labels.shape} != {want}")
    num_classes = logits.shape[-3]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise NumericError(f"labels outside [0, {num_classes - 1}]")
    if s.shape not in ((), want):
        raise NumericError(f"logvar shape {s.shape} incompatible with {want}")

    if not batched:
        logits = ad.reshape(logits, (1,) + logits.shape)
        labels = labels[None]
    ce = ad.softmax_cross_entropy(logits, labels)
    if not batched:
        ce = ad.reshape(ce, ce.shape[1:])
    sc = _clamped(s)
    loss_map = 0.5 * (ad.texp(-sc) * ce) + sc
    return loss_map, ad.tmean(loss_map)


def mse_loss(y1, reg_mean):
    """Plain mean squared error for the M1/M2a regression baselines."""
    y = _tensor(y1)
    f = _tensor(reg_mean)
    if y.shape != f.shape:
        raise NumericError(f"target shape {y.shape} != prediction shape {f.shape}")
    r = y - f
    loss_map = r * r
    return loss_map, ad.tmean(loss_map)


def ce_loss(seg_logits, y2):
    """Plain cross-entropy for the M1/M2a segmentation baselines."""
    logits = _tensor(seg_logits)
    labels = np.asarray(y2)
    if not np.issubdtype(labels.dtype, np.integer):
        raise NumericError(f"labels must be integers, got dtype {labels.dtype}")
    _require_finite("logits", logits)
    batched = logits.data.ndim == 4
    if not batched:
        logits = ad.reshape(logits, (1,) + logits.shape)
        labels = labels[None]
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise NumericError(f"labels outside [0, {num_classes - 1}]")
    ce = ad.softmax_cross_entropy(logits, labels)
    if not batched:
        ce = ad.reshape(ce, ce.shape[1:])
    return ce, ad.tmean(ce)


def joint_hetero_loss(output, y1, y2):
    """Sum of both heteroscedastic task losses; per-voxel weighting.

    Returns (total tensor, LossBreakdown). ``output`` must carry all four
    heads.
    """
    for head in ("reg_mean", "reg_logvar", "seg_logits", "seg_logvar"):
        if getattr(output, head, None) is None:
            raise ConfigError(f"joint heteroscedastic loss needs head {head!r}")
    reg_map, _ = regression_nll(y1, output.reg_mean, output.reg_logvar)
    seg_map, _ = classification_nll(output.seg_logits, output.seg_logvar, y2)
    return _assemble_joint(output.reg_logvar, output.seg_logvar, reg_map, seg_map)


def joint_homo_loss(output, y1, y2, s1, s2):
    """Joint loss with two learnable scalar log-variances (homoscedastic)."""
    for head in ("reg_mean", "seg_logits"):
        if getattr(output, head, None) is None:
            raise ConfigError(f"joint homoscedastic loss needs head {head!r}")
    s1 = _tensor(s1)
    s2 = _tensor(s2)
    if s1.shape != () or s2.shape != ():
        raise ConfigError("homoscedastic log-variances must be scalars")
    reg_map, _ = regression_nll(y1, output.reg_mean, s1)
    seg_map, _ = classification_nll(output.seg_logits, s2, y2)
    return _assemble_joint(s1, s2, reg_map, seg_map)


def _assemble_joint(s1, s2, reg_map, seg_map):
    # Split each task mean into data and log parts so the breakdown can be
    # reported; the voxel mean of a scalar log-variance is the scalar itself.
    s1c = _clamped(_tensor(s1))
    s2c = _clamped(_tensor(s2))
    reg_log = ad.tmean(s1c)
    seg_log = ad.tmean(s2c)
    reg_total = ad.tmean(reg_map)
    seg_total = ad.tmean(seg_map)
    reg_data = reg_total - reg_log
    seg_data = seg_total - seg_log
    total = reg_total + seg_total
    breakdown = LossBreakdown(
        reg_data_term=float(reg_data.data), reg_log_term=float(reg_log.data),
        seg_data_term=float(seg_data.data), seg_log_term=float(seg_log.data),
        total=float(total.data))
    return total, breakdown


def variant_loss(config, output, y1, y2, s1=None, s2=None):
    """Dispatch the training loss for a model variant.

    Returns (total tensor, LossBreakdown). Single-task baselines report
    their loss under the matching data term with the other fields zero.
    """
    v = config.variant
    if v in ("M1_reg", "M2a_reg"):
        _, mean = mse_loss(y1, output.reg_mean)
        return mean, LossBreakdown(reg_data_term=float(mean.data),
                                   total=float(mean.data))
    if v in ("M1_seg", "M2a_seg"):
        _, mean = ce_loss(output.seg_logits, y2)
        return mean, LossBreakdown(seg_data_term=float(mean.data),
                                   total=float(mean.data))
    if v == "M2b_reg":
        reg_map, _ = regression_nll(y1, output.reg_mean, output.reg_logvar)
        total, bd = _assemble_joint_single(output.reg_logvar, reg_map, "reg")
        return total, bd
    if v == "M2b_seg":
        seg_map, _ = classification_nll(output.seg_logits, output.seg_logvar, y2)
        total, bd = _assemble_joint_single(output.seg_logvar, seg_map, "seg")
        return total, bd
    if v == "M3_multitask_homo":
        if s1 is None or s2 is None:
            raise ConfigError("M3 loss needs the scalar log-variances s1, s2")
        return joint_homo_loss(output, y1, y2, s1, s2)
    if v == "M4_multitask_hetero":
        return joint_hetero_loss(output, y1, y2)
    raise ConfigError(f"no loss defined for variant {v!r}")


def _assemble_joint_single(s, task_map, which: str):
    sc = _clamped(_tensor(s))
    log_term = ad.tmean(sc)
    total = ad.tmean(task_map)
    data = total - log_term
    if which == "reg":
        bd = LossBreakdown(reg_data_term=float(data.data),
                           reg_log_term=float(log_term.data),
                           total=float(total.data))
    else:
        bd = LossBreakdown(seg_data_term=float(data.data),
                           seg_log_term=float(log_term.data),
                           total=float(total.data))
    return total, bd
