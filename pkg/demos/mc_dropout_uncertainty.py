"""Train a tiny joint model, then decompose its predictive uncertainty.

MC dropout keeps the dropout mask active at test time; T stochastic
passes (split over the last two checkpoints) give a parameter variance,
while the variance head gives the intrinsic (data noise) variance. Their
sum is the total predictive variance used for calibration.
"""

import tempfile
from pathlib import Path

import numpy as np

from hetmt.inference import plan_stitch, sliding_window_predict
from hetmt.model import ModelConfig
from hetmt.phantom import gen_dataset, load_case_bundle, load_manifest, \
    small_spec
from hetmt.training import TrainConfig, list_checkpoints, train_loop


def main():
    root = Path(tempfile.mkdtemp(prefix="hetmt_mc_"))
    spec = small_spec(size=(32, 32))
    manifest = gen_dataset(spec, 6, root / "data", train_fraction=0.6667)

    model_cfg = ModelConfig(variant="M4_multitask_hetero",
                            trunk_features=(4, 4, 8, 8, 8),
                            branch_widths=(4, 4, 4, 4))
    train_cfg = TrainConfig(patch_size=(16, 16), batch_size=4,
                            max_iterations=300, checkpoint_interval=150,
                            keep_checkpoints=2, seed=0)
    print("training M4 for 300 iterations on 4 cases...")
    train_loop(train_cfg, model_cfg, manifest, root / "run", log_every=100)

    ckpts = list_checkpoints(root / "run")[-2:]
    entry = [e for e in load_manifest(manifest) if e["split"] == "test"][0]
    bundle = load_case_bundle(entry)
    plan = plan_stitch(bundle.mr.data.shape, train_cfg.patch_size, 8)
    pred = sliding_window_predict(ckpts, bundle.mr.data, plan, T=20, seed=0)

    sigma = bundle.sigma_true.data
    noisy = sigma > 0.8 * spec.sigma_hi
    quiet = sigma < 1.2 * spec.sigma_lo
    print(f"\ncase {bundle.case_id}, T={pred.T} over "
          f"{[c for c in pred.checkpoint_ids]}")
    for name, field in (("intrinsic var", pred.reg_intrinsic_var),
                        ("parameter var", pred.reg_param_var),
                        ("total var", pred.reg_total_var)):
        print(f"{name:>14}: boundary zone {field[noisy].mean():9.1f}   "
              f"interior {field[quiet].mean():9.1f}")
    print("\nthe boundary/interior contrast should mirror the injected noise"
          "\nlaw; absolute levels keep converging with longer training")
    print(f"true sigma^2:   boundary zone {np.square(sigma[noisy]).mean():9.1f}"
          f"   interior {np.square(sigma[quiet]).mean():9.1f}")
    mae = np.abs(pred.reg_mean - bundle.ct.data).mean()
    print(f"\nbody MAE after this toy run: {mae:.1f}")


if __name__ == "__main__":
    main()
