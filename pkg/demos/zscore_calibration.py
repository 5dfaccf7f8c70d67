"""Check whether predicted uncertainty matches observed errors.

For a calibrated model, z = (reference - mean) / sqrt(total variance)
should be a standard normal. We bin z into equal-probability bins under
N(0, 1) and run a chi-squared goodness-of-fit test; we also compare the
heteroscedastic model against a homoscedastic ablation whose two scalar
variances cannot adapt spatially.
"""

import tempfile
from pathlib import Path

import numpy as np

from hetmt.inference import plan_stitch, sliding_window_predict
from hetmt.metrics import zscore_map, zscore_stats_chi2
from hetmt.model import ModelConfig
from hetmt.phantom import gen_dataset, load_case_bundle, load_manifest, \
    small_spec
from hetmt.training import TrainConfig, list_checkpoints, train_loop


def pooled_z(manifest, run_dir, patch, stride=8, T=20):
    ckpts = list_checkpoints(run_dir)[-2:]
    zs = []
    for entry in [e for e in load_manifest(manifest) if e["split"] == "test"]:
        bundle = load_case_bundle(entry)
        plan = plan_stitch(bundle.mr.data.shape, patch, stride)
        pred = sliding_window_predict(ckpts, bundle.mr.data, plan, T, seed=0)
        z = zscore_map(pred.reg_mean, pred.reg_total_var, bundle.ct.data,
                       np.ones(bundle.ct.data.shape, dtype=bool))
        zs.append(z[np.isfinite(z)])
    return np.concatenate(zs)


def main():
    root = Path(tempfile.mkdtemp(prefix="hetmt_calib_"))
    spec = small_spec(size=(32, 32))
    manifest = gen_dataset(spec, 6, root / "data", train_fraction=0.6667)
    train_cfg = TrainConfig(patch_size=(16, 16), batch_size=4,
                            max_iterations=400, checkpoint_interval=200,
                            keep_checkpoints=2, seed=0)
    shape = dict(trunk_features=(4, 4, 8, 8, 8), branch_widths=(4, 4, 4, 4))

    for variant in ("M4_multitask_hetero", "M3_multitask_homo"):
        print(f"training {variant} for {train_cfg.max_iterations} iterations...")
        train_loop(train_cfg, ModelConfig(variant=variant, **shape),
                   manifest, root / variant)

    print(f"\n{'variant':>22}  {'z mean':>8}  {'z std':>7}  {'chi2':>8}"
          f"  {'p':>9}")
    for variant in ("M4_multitask_hetero", "M3_multitask_homo"):
        z = pooled_z(manifest, root / variant, train_cfg.patch_size)
        stats = zscore_stats_chi2(z, bins=8)
        print(f"{variant:>22}  {stats.mean:8.3f}  {stats.std:7.3f}"
              f"  {stats.chi2:8.1f}  {stats.p_value:9.2e}")
    print("\na perfectly calibrated model would show mean 0, std 1, small chi2;"
          "\nthe per-voxel variance head should sit closer to that than the"
          "\ntwo-scalar ablation (toy-scale runs are noisy, trends only)")


if __name__ == "__main__":
    main()
