"""Patch-based stochastic training with ADAM and rolling checkpoints.

The loop draws random co-located (mr, ct, labels) patches, runs the
variant's forward pass with dropout where the variant uses it, applies the
variant's loss and one bias-corrected ADAM update per iteration. Patch
corners, dropout masks and everything else derive from (seed, iteration),
so a run is reproducible and resuming from a checkpoint re-creates the
identical remaining schedule.

Checkpoints are written every ``checkpoint_interval`` iterations and the
newest ``keep_checkpoints`` are retained for multi-checkpoint Monte Carlo
sampling. A loss history CSV (iteration, total and the four breakdown
terms; unused terms zero for single-task baselines) and a JSON echo of the
configuration are written next to them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingError
from .losses import LossBreakdown, variant_loss
from .model import ModelConfig, build, forward_tensors, load_checkpoint, save_checkpoint
from .phantom import load_manifest
from .volume import read_volume

_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults are the desk-scale setup."""

    patch_size: tuple[int, int] = (32, 32)
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iterations: int = 2000
    checkpoint_interval: int = 1000
    keep_checkpoints: int = 2
    input_offset: float = 0.0
    input_scale: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if len(self.patch_size) != 2 or any(p < 8 for p in self.patch_size):
            raise ConfigError(f"patch_size must be two dims >= 8, got {self.patch_size}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        if self.keep_checkpoints < 1:
            raise ConfigError("keep_checkpoints must be >= 1")
        if self.input_scale == 0:
            raise ConfigError("input_scale must be nonzero")


@dataclass
class TrainState:
    """Everything the loop mutates: weights, moments, counters, history."""

    params: dict
    optimizer: ad.Adam
    model_config: ModelConfig
    train_config: TrainConfig
    iteration: int = 0
    history: list = field(default_factory=list)


def make_state(model_config: ModelConfig, train_config: TrainConfig,
               init_seed: int) -> TrainState:
    model_config.validate()
    train_config.validate()
    params = build(model_config, init_seed)
    opt = ad.Adam(params, lr=train_config.learning_rate,
                  beta1=train_config.beta1, beta2=train_config.beta2,
                  eps=train_config.adam_eps)
    return TrainState(params=params, optimizer=opt, model_config=model_config,
                      train_config=train_config)


def _iter_seed(seed: int, iteration: int, tag: int) -> int:
    ss = np.random.SeedSequence([seed & _MASK64, iteration, tag])
    return int(ss.generate_state(1, np.uint64)[0])


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Patch-sampling RNG for one iteration; stateless across the run."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed & _MASK64, iteration, 0x706174])))


def load_training_cases(manifest_path, split: str = "train",
                        num_classes: int | None = None) -> list[dict]:
    """Load case arrays for one split into memory."""
    entries = [e for e in load_manifest(manifest_path) if e["split"] == split]
    if not entries:
        raise TrainingError(f"manifest {manifest_path} has no {split!r} cases")
    cases = []
    for e in entries:
        cases.append({
            "id": e["id"],
            "mr": read_volume(e["mr"]).data,
            "ct": read_volume(e["ct"]).data,
            "labels": read_volume(e["labels"], num_classes=num_classes).data,
        })
    return cases


def sample_patch_batch(cases: list[dict], cfg: TrainConfig,
                       rng: np.random.Generator):
    """Draw a batch of co-located patches: uniform case, slice and corner.

    Returns (x, y1, y2): raw mr patches (B, 1, ph, pw) float32, ct targets
    (B, ph, pw) float32, labels (B, ph, pw) int64.
    """
    ph, pw = cfg.patch_size
    xs = np.empty((cfg.batch_size, 1, ph, pw), dtype=np.float32)
    y1 = np.empty((cfg.batch_size, ph, pw), dtype=np.float32)
    y2 = np.empty((cfg.batch_size, ph, pw), dtype=np.int64)
    for b in range(cfg.batch_size):
        case = cases[int(rng.integers(len(cases)))]
        mr, ct, labels = case["mr"], case["ct"], case["labels"]
        if mr.ndim == 3:
            z = int(rng.integers(mr.shape[0]))
            mr, ct, labels = mr[z], ct[z], labels[z]
        hh, ww = mr.shape
        if ph > hh or pw > ww:
            raise TrainingError(
                f"patch {cfg.patch_size} larger than slice {(hh, ww)} "
                f"in case {case['id']}")
        r0 = int(rng.integers(hh - ph + 1))
        c0 = int(rng.integers(ww - pw + 1))
        xs[b, 0] = mr[r0:r0 + ph, c0:c0 + pw]
        y1[b] = ct[r0:r0 + ph, c0:c0 + pw]
        y2[b] = labels[r0:r0 + ph, c0:c0 + pw]
    return xs, y1, y2


def train_step(state: TrainState, batch) -> LossBreakdown:
    """One forward/backward/ADAM update; advances the iteration counter."""
    xs, y1, y2 = batch
    cfg = state.train_config
    mcfg = state.model_config
    xn = ((xs - cfg.input_offset) * cfg.input_scale).astype(np.float32)

    tensors = {name: ad.Tensor(arr, requires_grad=True)
               for name, arr in state.params.items()}
    drop_seed = _iter_seed(cfg.seed, state.iteration, 0x64726F70)
    out = forward_tensors(tensors, mcfg, xn, mode="train", rng_seed=drop_seed)
    total, breakdown = variant_loss(mcfg, out, y1, y2,
                                    s1=tensors.get("s1"), s2=tensors.get("s2"))
    if not np.isfinite(total.data):
        raise TrainingError(
            f"non-finite loss at iteration {state.iteration}: "
            f"terms {breakdown.fields()}")
    total.backward()
    grads = {name: t.grad for name, t in tensors.items() if t.grad is not None}
    state.optimizer.step(state.params, grads)
    state.iteration += 1
    state.history.append((state.iteration, breakdown))
    return breakdown


_HISTORY_COLUMNS = ("iteration", "total", "reg_data_term", "reg_log_term",
                    "seg_data_term", "seg_log_term")


def write_history_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HISTORY_COLUMNS)
        for iteration, bd in rows:
            writer.writerow([iteration, f"{bd.total:.8g}",
                             f"{bd.reg_data_term:.8g}", f"{bd.reg_log_term:.8g}",
                             f"{bd.seg_data_term:.8g}", f"{bd.seg_log_term:.8g}"])


def read_history_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != _HISTORY_COLUMNS:
            raise TrainingError(f"unexpected history columns {header} in {path}")
        for rec in reader:
            bd = LossBreakdown(reg_data_term=float(rec[2]), reg_log_term=float(rec[3]),
                               seg_data_term=float(rec[4]), seg_log_term=float(rec[5]),
                               total=float(rec[1]))
            rows.append((int(rec[0]), bd))
    return rows


def _checkpoint_path(out_dir: Path, iteration: int) -> Path:
    return out_dir / f"ckpt_{iteration:06d}"


def list_checkpoints(out_dir) -> list[Path]:
    """Checkpoint base paths in ascending iteration order."""
    out = Path(out_dir)
    return sorted(p.with_suffix("") for p in out.glob("ckpt_*.json"))


def train_loop(train_config: TrainConfig, model_config: ModelConfig,
               manifest_path, out_dir, init_seed: int | None = None,
               resume_from=None, log_every: int = 0) -> list[Path]:
    """Run training to max_iterations; returns retained checkpoint paths.

    ``init_seed`` defaults to a value derived from the training seed.
    ``resume_from`` restarts from a saved checkpoint with fresh ADAM
    moments; the loss history continues from the checkpoint's iteration.
    """
    model_config.validate()
    train_config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if init_seed is None:
        init_seed = _iter_seed(train_config.seed, 0, 0x696E6974)

    history_path = out / "loss_history.csv"
    if resume_from is not None:
        params, ckpt_config, start_iter, init_seed = load_checkpoint(resume_from)
        if ckpt_config != model_config:
            raise ConfigError("checkpoint model config differs from the requested one")
        state = make_state(model_config, train_config, init_seed)
        state.params = params
        state.optimizer = ad.Adam(params, lr=train_config.learning_rate,
                                  beta1=train_config.beta1, beta2=train_config.beta2,
                                  eps=train_config.adam_eps)
        state.iteration = start_iter
        if history_path.exists():
            state.history = [row for row in read_history_csv(history_path)
                             if row[0] <= start_iter]
    else:
        state = make_state(model_config, train_config, init_seed)

    cases = load_training_cases(manifest_path, "train",
                                num_classes=model_config.num_classes)

    echo = {"model_config": asdict(model_config), "train_config": asdict(train_config),
            "init_seed": int(init_seed)}
    (out / "train_config.json").write_text(
        json.dumps(echo, sort_keys=True, indent=2) + "\n")

    kept: list[Path] = []
    while state.iteration < train_config.max_iterations:
        rng = iteration_rng(train_config.seed, state.iteration)
        batch = sample_patch_batch(cases, train_config, rng)
        bd = train_step(state, batch)
        if log_every and state.iteration % log_every == 0:
            print(f"iter {state.iteration:6d}  total {bd.total:.5f}", flush=True)
        it = state.iteration
        if it % train_config.checkpoint_interval == 0 or it == train_config.max_iterations:
            path = _checkpoint_path(out, it)
            if path not in kept:
                save_checkpoint(path, state.params, model_config, it, init_seed)
                kept.append(path)
            while len(kept) > train_config.keep_checkpoints:
                victim = kept.pop(0)
                victim.with_suffix(".bin").unlink(missing_ok=True)
                victim.with_suffix(".json").unlink(missing_ok=True)

    write_history_csv(history_path, state.history)
    return kept
