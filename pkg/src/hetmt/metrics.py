"""Accuracy and calibration metrics: masked MAE, fuzzy Dice, z-scores
and the chi-squared goodness-of-fit test against the standard normal.

z = (reference - predicted mean) / sqrt(predicted total variance); a
calibrated predictor yields z ~ N(0, 1). The chi-squared test bins z into
K equal-probability intervals under the null (edges from the normal
quantile function, intervals half-open on the left) and compares counts
against the uniform expectation N/K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MetricsError
from .special import chi2_sf, norm_ppf


def _arr(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data)


def mae_masked(pred, ref, mask) -> float:
    """Mean absolute error over the masked voxels."""
    p = _arr(pred).astype(np.float64)
    r = _arr(ref).astype(np.float64)
    m = _arr(mask).astype(bool)
    if p.shape != r.shape or p.shape != m.shape:
        raise MetricsError(f"shape mismatch: pred {p.shape}, ref {r.shape}, "
                           f"mask {m.shape}")
    if not m.any():
        raise MetricsError("mask is empty")
    return float(np.abs(p[m] - r[m]).mean())


def abs_error_sums(pred, ref, mask) -> tuple[float, int]:
    """(sum of |pred - ref| over mask, voxel count); for pooled MAE."""
    p = _arr(pred).astype(np.float64)
    r = _arr(ref).astype(np.float64)
    m = _arr(mask).astype(bool)
    if not m.any():
        raise MetricsError("mask is empty")
    return float(np.abs(p[m] - r[m]).sum()), int(m.sum())


def fuzzy_dice(prob, ref_labels, c: int) -> float:
    """Soft Dice of class-c probabilities against one-hot reference labels.

    Returns 1.0 when the class is absent from both (both sums zero).
    """
    p = _arr(prob).astype(np.float64)
    g = _arr(ref_labels)
    if p.ndim != g.ndim + 1:
        raise MetricsError(f"prob shape {p.shape} does not add one class axis "
                           f"to labels {g.shape}")
    if not (0 <= c < p.shape[0]):
        raise MetricsError(f"class {c} outside [0, {p.shape[0] - 1}]")
    pc = p[c]
    gc = (g == c).astype(np.float64)
    denom = pc.sum() + gc.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (pc * gc).sum() / denom)


def zscore_map(reg_mean, reg_total_var, ref, mask) -> np.ndarray:
    """Per-voxel z map on the mask; NaN outside it."""
    mu = _arr(reg_mean).astype(np.float64)
    var = _arr(reg_total_var).astype(np.float64)
    r = _arr(ref).astype(np.float64)
    m = _arr(mask).astype(bool)
    if not (mu.shape == var.shape == r.shape == m.shape):
        raise MetricsError("zscore_map inputs must share one shape")
    if not m.any():
        raise MetricsError("mask is empty")
    if (var[m] <= 0).any():
        raise MetricsError("non-positive predicted variance inside the mask")
    z = np.full(mu.shape, np.nan)
    z[m] = (r[m] - mu[m]) / np.sqrt(var[m])
    return z


@dataclass(frozen=True)
class ZScoreStats:
    """Sample statistics plus the equal-probability-bin chi-squared test."""

    mean: float
    std: float
    chi2: float
    dof: int
    p_value: float
    n: int
    bins: int
    edges: tuple[float, ...]
    counts: tuple[int, ...]


def zscore_bin_counts(z: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts of z in K standard-normal equal-probability bins.

    Interior edges are Phi^{-1}(k/K); bins are (lo, hi], so a value equal
    to an edge falls in the lower bin.
    """
    edges = norm_ppf(np.arange(1, bins) / bins)
    idx = np.searchsorted(edges, z, side="left")
    return np.bincount(idx, minlength=bins).astype(np.int64), edges


def zscore_stats_chi2(z_values, bins: int = 8) -> ZScoreStats:
    """Mean/population-std of z and the chi-squared GOF against N(0,1)."""
    z = np.asarray(z_values, dtype=np.float64).ravel()
    z = z[np.isfinite(z)]
    if bins < 2:
        raise MetricsError(f"need at least 2 bins, got {bins}")
    n = z.size
    if n < 5 * bins:
        raise MetricsError(f"need >= {5 * bins} z samples for {bins} bins, got {n}")
    counts, edges = zscore_bin_counts(z, bins)
    expected = n / bins
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    dof = bins - 1
    return ZScoreStats(mean=float(z.mean()), std=float(z.std()),
                       chi2=chi2, dof=dof, p_value=chi2_sf(chi2, dof),
                       n=n, bins=bins, edges=tuple(float(e) for e in edges),
                       counts=tuple(int(c) for c in counts))


def organ_mask(labels, classes) -> np.ndarray:
    """Boolean mask of voxels whose label is in ``classes``."""
    lab = _arr(labels)
    mask = np.zeros(lab.shape, dtype=bool)
    for c in np.atleast_1d(classes):
        mask |= lab == c
    return mask


DEFAULT_REGIONS = ("body",)


def evaluate_case(pred, ref_ct, labels, sigma_true=None, num_classes: int = 6,
                  class_names=None) -> dict:
    """Per-case metric record for one StochasticPrediction.

    Regions: "body" is the whole image, plus one region per nonzero class
    present in the reference. Returns sums alongside means so reports can
    pool voxel-weighted across cases. z values stay in the record (not
    serialized) for pooled calibration stats.
    """
    record: dict = {"mae": {}, "mae_sums": {}, "dice": {}}
    names = _region_names(num_classes, class_names)
    lab = _arr(labels)

    if pred.reg_mean is not None:
        body = np.ones(lab.shape, dtype=bool)
        regions = {"body": body}
        for c in range(1, num_classes):
            m = lab == c
            if m.any():
                regions[names[c]] = m
        for reg_name, m in regions.items():
            s, cnt = abs_error_sums(pred.reg_mean, ref_ct, m)
            record["mae"][reg_name] = s / cnt
            record["mae_sums"][reg_name] = (s, cnt)
        if pred.reg_total_var is not None and (pred.reg_total_var > 0).all():
            z = zscore_map(pred.reg_mean, pred.reg_total_var, ref_ct, body)
            record["z_values"] = z[np.isfinite(z)]
    if pred.seg_mean_prob is not None:
        for c in range(num_classes):
            record["dice"][names[c]] = fuzzy_dice(pred.seg_mean_prob, lab, c)
    return record


def _region_names(num_classes: int, class_names=None) -> list[str]:
    if class_names is not None:
        if len(class_names) != num_classes:
            raise MetricsError(f"need {num_classes} class names, got "
                               f"{len(class_names)}")
        return list(class_names)
    return [f"class{c}" for c in range(num_classes)]


def build_report(variant: str, case_ids, records, T: int, bins: int = 8,
                 num_classes: int = 6, class_names=None) -> dict:
    """Assemble the JSON-ready calibration report for one variant.

    Pooling is voxel-weighted for MAE and z statistics; Dice pools as the
    unweighted mean over cases carrying the class.
    """
    if not records:
        raise MetricsError("no case records to report")
    names = _region_names(num_classes, class_names)
    cases = []
    pooled_sums: dict[str, list] = {}
    pooled_dice: dict[str, list] = {}
    z_all = []
    for cid, rec in zip(case_ids, records):
        entry: dict = {"id": cid}
        if rec["mae"]:
            entry["mae"] = {k: round(v, 10) for k, v in sorted(rec["mae"].items())}
            for k, (s, n) in rec["mae_sums"].items():
                pooled_sums.setdefault(k, [0.0, 0])
                pooled_sums[k][0] += s
                pooled_sums[k][1] += n
        if rec["dice"]:
            entry["dice"] = {k: round(v, 10) for k, v in sorted(rec["dice"].items())}
            for k, v in rec["dice"].items():
                pooled_dice.setdefault(k, []).append(v)
        if "z_values" in rec:
            z = rec["z_values"]
            entry["z"] = {"mean": round(float(z.mean()), 10),
                          "std": round(float(z.std()), 10), "n": int(z.size)}
            z_all.append(z)
        cases.append(entry)

    pooled: dict = {}
    if pooled_sums:
        pooled["mae"] = {k: round(s / n, 10) for k, (s, n) in
                         sorted(pooled_sums.items())}
    if pooled_dice:
        pooled["dice"] = {k: round(float(np.mean(v)), 10) for k, v in
                          sorted(pooled_dice.items())}
        organ = [np.mean(pooled_dice[names[c]]) for c in range(1, num_classes)
                 if names[c] in pooled_dice]
        if organ:
            pooled["dice_organ_mean"] = round(float(np.mean(organ)), 10)
    histogram = None
    if z_all:
        z = np.concatenate(z_all)
        stats = zscore_stats_chi2(z, bins=bins)
        pooled["z"] = {"mean": round(stats.mean, 10), "std": round(stats.std, 10),
                       "chi2": round(stats.chi2, 10), "dof": stats.dof,
                       "p_value": stats.p_value, "n": stats.n,
                       "bins": stats.bins}
        histogram = {"edges": [round(float(e), 10) for e in stats.edges],
                     "counts": list(stats.counts)}

    report = {"schema_version": 1, "variant": variant, "T": int(T),
              "bins": int(bins), "case_ids": list(case_ids), "cases": cases,
              "pooled": pooled}
    if histogram is not None:
        report["z_histogram"] = histogram
    return report


def write_report(report: dict, out_dir, stem: str = "report") -> list[Path]:
    """Write report JSON plus metrics and z-histogram CSVs; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    paths.append(json_path)

    lines = ["variant,case,region_or_class,metric,value"]
    variant = report["variant"]

    def add_rows(case_name, block):
        for metric in ("mae", "dice"):
            for key, val in sorted(block.get(metric, {}).items()):
                lines.append(f"{variant},{case_name},{key},{metric},{val:.10g}")
        if "z" in block:
            for stat, val in sorted(block["z"].items()):
                lines.append(f"{variant},{case_name},z,{stat},{val:.10g}")

    for entry in report["cases"]:
        add_rows(entry["id"], entry)
    add_rows("pooled", report["pooled"])
    csv_path = out / f"{stem}_metrics.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    paths.append(csv_path)

    if "z_histogram" in report:
        hist = report["z_histogram"]
        edges = [-np.inf] + list(hist["edges"]) + [np.inf]
        rows = ["bin_lo,bin_hi,count"]
        for i, count in enumerate(hist["counts"]):
            rows.append(f"{edges[i]:.10g},{edges[i + 1]:.10g},{count}")
        hist_path = out / f"{stem}_z_histogram.csv"
        hist_path.write_text("\n".join(rows) + "\n")
        paths.append(hist_path)
    return paths


def merge_reports(reports: list[dict]) -> dict:
    """Combine per-variant reports into one comparison structure."""
    if not reports:
        raise MetricsError("no reports to merge")
    variants = {}
    for rep in reports:
        variant = rep.get("variant", "unknown")
        if variant in variants:
            raise MetricsError(f"duplicate reports for variant {variant!r}")
        variants[variant] = rep
    return {"schema_version": 1, "variants": variants}


def write_combined_report(combined: dict, out_dir) -> list[Path]:
    """Write the merged report JSON plus one comparison CSV.

    CSV rows: variant, case (or "pooled"), region_or_class, metric, value,
    concatenated across variants; plus a per-variant z-histogram CSV.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    json_path = out / "report.json"
    json_path.write_text(json.dumps(combined, sort_keys=True, indent=2) + "\n")
    paths.append(json_path)

    lines = ["variant,case,region_or_class,metric,value"]
    hist_rows = ["variant,bin_lo,bin_hi,count"]
    have_hist = False
    for variant in sorted(combined["variants"]):
        rep = combined["variants"][variant]

        def add_rows(case_name, block):
            for metric in ("mae", "dice"):
                for key, val in sorted(block.get(metric, {}).items()):
                    lines.append(f"{variant},{case_name},{key},{metric},{val:.10g}")
            if "z" in block:
                for stat, val in sorted(block["z"].items()):
                    lines.append(f"{variant},{case_name},z,{stat},{val:.10g}")

        for entry in rep.get("cases", []):
            add_rows(entry["id"], entry)
        add_rows("pooled", rep.get("pooled", {}))
        if "z_histogram" in rep:
            have_hist = True
            hist = rep["z_histogram"]
            edges = [-np.inf] + list(hist["edges"]) + [np.inf]
            for i, count in enumerate(hist["counts"]):
                hist_rows.append(
                    f"{variant},{edges[i]:.10g},{edges[i + 1]:.10g},{count}")
    csv_path = out / "report_metrics.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    paths.append(csv_path)
    if have_hist:
        hist_path = out / "report_z_histogram.csv"
        hist_path.write_text("\n".join(hist_rows) + "\n")
        paths.append(hist_path)
    return paths
