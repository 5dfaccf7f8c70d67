"""Probabilistic multi-task learning on synthetic phantoms.

Joint image-to-image regression and voxel-wise segmentation with
per-voxel heteroscedastic task weighting, Monte Carlo dropout inference,
and z-score / chi-squared calibration analysis, all on numpy.

Set ``HETMT_THREADS`` to cap BLAS worker threads; it must be set before
numpy is first imported to take effect, so importing ``hetmt`` before
numpy (as the CLI does) is the reliable path.
"""

import os as _os

if "HETMT_THREADS" in _os.environ:
    _cap = _os.environ["HETMT_THREADS"]
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap)

from .errors import (HetmtError, VolumeError, PhantomError, ConfigError,
                     NumericError, TrainingError, MetricsError)
from .volume import Volume, read_volume, write_volume
from .phantom import (PhantomSpec, OrganPrior, CaseBundle, gen_phantom_case,
                      gen_dataset, load_manifest)
from .model import ModelConfig, DualTaskOutput, build, forward
from .losses import (LossBreakdown, regression_nll, classification_nll,
                     scaled_softmax, joint_hetero_loss, joint_homo_loss)
from .training import TrainConfig, TrainState, make_state, train_step, train_loop
from .inference import (StochasticPrediction, StitchPlan, plan_stitch,
                        mc_forward_samples, sliding_window_predict)
from .metrics import (mae_masked, fuzzy_dice, zscore_map, zscore_stats_chi2,
                      build_report, write_report)

__version__ = "0.1.0"

__all__ = [
    "HetmtError", "VolumeError", "PhantomError", "ConfigError", "NumericError",
    "TrainingError", "MetricsError",
    "Volume", "read_volume", "write_volume",
    "PhantomSpec", "OrganPrior", "CaseBundle", "gen_phantom_case",
    "gen_dataset", "load_manifest",
    "ModelConfig", "DualTaskOutput", "build", "forward",
    "LossBreakdown", "regression_nll", "classification_nll", "scaled_softmax",
    "joint_hetero_loss", "joint_homo_loss",
    "TrainConfig", "TrainState", "make_state", "train_step", "train_loop",
    "StochasticPrediction", "StitchPlan", "plan_stitch", "mc_forward_samples",
    "sliding_window_predict",
    "mae_masked", "fuzzy_dice", "zscore_map", "zscore_stats_chi2",
    "build_report", "write_report",
]
