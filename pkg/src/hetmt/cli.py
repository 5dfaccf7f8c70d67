"""Command-line entry point for reproducible phantom experiments.

Subcommands: genphantom, train, infer, eval, calibrate, report. Settings
come from a JSON config file (``--config``) with sections "phantom",
"model", "train", "inference", "eval" and a global "seed"; any value can
be overridden on the command line with dotted flags, e.g.
``--train.max_iterations 500`` or ``--model.variant M4``.

Every subcommand puts its artifacts under ``--out`` and writes an
``outputs.json`` manifest there. Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import ConfigError, HetmtError
from . import metrics, phantom
from .inference import plan_stitch, save_prediction, load_prediction, \
    sliding_window_predict
from .model import ModelConfig, canonical_variant, load_checkpoint
from .phantom import OrganPrior, PhantomSpec, gen_dataset, load_manifest
from .training import TrainConfig, list_checkpoints, train_loop
from .volume import read_volume

CONFIG_VERSION = 1

_INFER_DEFAULTS = {"T": 20, "stride": 16, "use_checkpoints": 2, "split": "test"}
_EVAL_DEFAULTS = {"bins": 8, "class_names": None}


class _Parser(argparse.ArgumentParser):
    # Usage problems must exit 1, not argparse's default 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(cfg: dict, extras: list[str]) -> None:
    """Fold ``--dotted.key value`` pairs into the config dict."""
    i = 0
    while i < len(extras):
        key = extras[i]
        if not key.startswith("--") or i + 1 >= len(extras):
            raise SystemExit(_usage_error(f"unrecognized argument {key!r}"))
        path = key[2:].split(".")
        value = _coerce(extras[i + 1])
        node = cfg
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise SystemExit(_usage_error(f"cannot override {key!r}"))
        node[path[-1]] = value
        i += 2


def _usage_error(message: str) -> int:
    print(f"hetmt: error: {message}", file=sys.stderr)
    return 1


def _load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    version = cfg.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}")
    return cfg


def _section(cfg: dict, name: str, defaults: dict) -> dict:
    block = dict(defaults)
    given = cfg.get(name, {})
    if not isinstance(given, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: "
                          f"{sorted(unknown)}")
    block.update(given)
    return block


def _dataclass_from(cls, cfg: dict, name: str, **forced):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    given = cfg.get(name, {})
    if not isinstance(given, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(given) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: "
                          f"{sorted(unknown)}")
    kwargs = dict(given)
    kwargs.update(forced)
    for key in ("size", "spacing", "ct_means", "mr_means", "bone_labels",
                "patch_size", "trunk_features", "dilations", "branch_widths"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def _phantom_spec(cfg: dict, seed: int) -> PhantomSpec:
    section = dict(cfg.get("phantom", {}))
    organs = section.pop("organs", None)
    shadow = dict(cfg)
    shadow["phantom"] = section
    forced = {}
    if "seed" not in section:
        forced["seed"] = seed
    if organs is not None:
        forced["organs"] = tuple(
            OrganPrior(name=o["name"], label=int(o["label"]),
                       center=tuple(tuple(r) for r in o["center"]),
                       radius=tuple(tuple(r) for r in o["radius"]))
            for o in organs)
    spec = _dataclass_from(PhantomSpec, shadow, "phantom", **forced)
    spec.validate()
    return spec


def _model_config(cfg: dict) -> ModelConfig:
    section = dict(cfg.get("model", {}))
    if "variant" in section:
        section["variant"] = canonical_variant(section["variant"])
    shadow = dict(cfg)
    shadow["model"] = section
    mc = _dataclass_from(ModelConfig, shadow, "model")
    mc.validate()
    return mc


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    forced = {}
    if "seed" not in cfg.get("train", {}):
        forced["seed"] = seed
    tc = _dataclass_from(TrainConfig, cfg, "train", **forced)
    tc.validate()
    return tc


def _write_outputs(out_dir: Path, payload: dict) -> None:
    (out_dir / "outputs.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _class_names(eval_cfg: dict, num_classes: int):
    names = eval_cfg.get("class_names")
    if names is None and num_classes == len(phantom.CLASS_NAMES):
        names = list(phantom.CLASS_NAMES)
    return names


def _cmd_genphantom(args, cfg: dict) -> int:
    seed = int(cfg.get("seed", 0))
    spec = _phantom_spec(cfg, seed)
    n_cases = int(args.cases if args.cases is not None else cfg.get("cases", 16))
    fraction = float(cfg.get("train_fraction", 0.75))
    out = Path(args.out)
    manifest = gen_dataset(spec, n_cases, out, train_fraction=fraction)
    entries = load_manifest(manifest)
    files = sorted(p.name for p in out.iterdir() if p.name != "outputs.json")
    _write_outputs(out, {"command": "genphantom", "cases": n_cases,
                         "train": sum(e["split"] == "train" for e in entries),
                         "test": sum(e["split"] == "test" for e in entries),
                         "files": files})
    print(f"wrote {n_cases} cases to {out}")
    return 0


def _cmd_train(args, cfg: dict) -> int:
    seed = int(cfg.get("seed", 0))
    model_cfg = _model_config(cfg)
    train_cfg = _train_config(cfg, seed)
    out = Path(args.out)
    kept = train_loop(train_cfg, model_cfg, args.manifest, out,
                      resume_from=args.resume, log_every=args.log_every)
    files = sorted(p.name for base in kept
                   for p in (base.with_suffix(".bin"), base.with_suffix(".json")))
    files += ["loss_history.csv", "train_config.json"]
    _write_outputs(out, {"command": "train", "variant": model_cfg.variant,
                         "iterations": train_cfg.max_iterations,
                         "checkpoints": [p.name for p in kept],
                         "files": sorted(files)})
    print(f"trained {model_cfg.variant} for {train_cfg.max_iterations} "
          f"iterations; checkpoints: {[p.name for p in kept]}")
    return 0


def _cmd_infer(args, cfg: dict) -> int:
    seed = int(cfg.get("seed", 0))
    infer_cfg = _section(cfg, "inference", _INFER_DEFAULTS)
    train_dir = Path(args.train_dir)
    echo_path = train_dir / "train_config.json"
    if not echo_path.exists():
        raise ConfigError(f"missing {echo_path}; is {train_dir} a training run?")
    echo = json.loads(echo_path.read_text())
    patch = tuple(echo["train_config"]["patch_size"])
    offset = float(echo["train_config"]["input_offset"])
    scale = float(echo["train_config"]["input_scale"])

    ckpts = list_checkpoints(train_dir)
    use = int(infer_cfg["use_checkpoints"])
    if len(ckpts) < use:
        raise ConfigError(f"need {use} checkpoints in {train_dir}, "
                          f"found {len(ckpts)}")
    ckpts = ckpts[-use:]
    _, model_cfg, _, _ = load_checkpoint(ckpts[0])

    split = args.split or infer_cfg["split"]
    entries = [e for e in load_manifest(args.manifest) if e["split"] == split]
    if not entries:
        raise ConfigError(f"no cases with split {split!r} in {args.manifest}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T = int(infer_cfg["T"])
    stride = infer_cfg["stride"]
    files = []
    for entry in entries:
        mr = read_volume(entry["mr"])
        plan = plan_stitch(mr.data.shape, patch, stride)
        pred = sliding_window_predict(ckpts, mr, plan, T, seed,
                                      input_offset=offset, input_scale=scale)
        index_path = save_prediction(pred, out, entry["id"], spacing=mr.spacing)
        files.append(index_path.name)
        print(f"predicted case {entry['id']} "
              f"({len(plan.origins)} patches x {T} samples)")
    _write_outputs(out, {"command": "infer", "variant": model_cfg.variant,
                         "T": T, "split": split,
                         "checkpoints": [p.name for p in ckpts],
                         "cases": [e["id"] for e in entries],
                         "files": sorted(files)})
    return 0


def _gather_records(args, cfg: dict, with_z: bool):
    eval_cfg = _section(cfg, "eval", _EVAL_DEFAULTS)
    pred_dir = Path(args.pred_dir)
    pred_meta_path = pred_dir / "outputs.json"
    if not pred_meta_path.exists():
        raise ConfigError(f"missing {pred_meta_path}; run `hetmt infer` first")
    meta = json.loads(pred_meta_path.read_text())
    variant = meta.get("variant", "unknown")
    T = int(meta.get("T", 0))
    case_ids = meta.get("cases", [])
    if not case_ids:
        raise ConfigError(f"no predicted cases listed in {pred_meta_path}")

    entries = {e["id"]: e for e in load_manifest(args.manifest)}
    num_classes = None
    records = []
    for cid in case_ids:
        if cid not in entries:
            raise ConfigError(f"case {cid!r} not present in {args.manifest}")
        entry = entries[cid]
        pred = load_prediction(pred_dir / f"{cid}_prediction.json")
        ct = read_volume(entry["ct"]).data
        labels = read_volume(entry["labels"]).data
        if num_classes is None:
            if pred.seg_mean_prob is not None:
                num_classes = pred.seg_mean_prob.shape[0]
            else:
                num_classes = int(labels.max()) + 1
        rec = metrics.evaluate_case(pred, ct, labels, num_classes=num_classes,
                                    class_names=_class_names(eval_cfg, num_classes))
        if not with_z:
            rec.pop("z_values", None)
        records.append(rec)
    names = _class_names(eval_cfg, num_classes)
    return variant, T, case_ids, records, int(eval_cfg["bins"]), num_classes, names


def _cmd_eval(args, cfg: dict) -> int:
    variant, T, case_ids, records, bins, ncls, names = \
        _gather_records(args, cfg, with_z=False)
    report = metrics.build_report(variant, case_ids, records, T, bins=bins,
                                  num_classes=ncls, class_names=names)
    out = Path(args.out)
    paths = metrics.write_report(report, out, stem="eval")
    _write_outputs(out, {"command": "eval", "variant": variant,
                         "files": sorted(p.name for p in paths)})
    pooled = report["pooled"]
    if "mae" in pooled:
        print(f"{variant} pooled body MAE: {pooled['mae'].get('body'):.4g}")
    if "dice_organ_mean" in pooled:
        print(f"{variant} mean organ Dice: {pooled['dice_organ_mean']:.4g}")
    return 0


def _cmd_calibrate(args, cfg: dict) -> int:
    variant, T, case_ids, records, bins, ncls, names = \
        _gather_records(args, cfg, with_z=True)
    if not any("z_values" in r for r in records):
        raise ConfigError(
            f"predictions for {variant} carry no usable total variance; "
            "calibration needs an uncertainty-aware variant")
    report = metrics.build_report(variant, case_ids, records, T, bins=bins,
                                  num_classes=ncls, class_names=names)
    out = Path(args.out)
    paths = metrics.write_report(report, out, stem="calibration")
    _write_outputs(out, {"command": "calibrate", "variant": variant,
                         "files": sorted(p.name for p in paths)})
    z = report["pooled"]["z"]
    print(f"{variant} pooled z: mean {z['mean']:.4g}, std {z['std']:.4g}, "
          f"chi2 {z['chi2']:.4g} (dof {z['dof']}), p {z['p_value']:.3g}")
    return 0


def _cmd_report(args, cfg: dict) -> int:
    sources = [Path(p) for p in args.inputs]
    reports = []
    for src in sources:
        if not src.exists():
            raise ConfigError(f"missing report input {src}")
        reports.append(json.loads(src.read_text()))
    combined = metrics.merge_reports(reports)
    out = Path(args.out)
    paths = metrics.write_combined_report(combined, out)
    _write_outputs(out, {"command": "report",
                         "variants": sorted(combined["variants"]),
                         "files": sorted(p.name for p in paths)})
    print(f"combined report over variants: {sorted(combined['variants'])}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="hetmt",
                     description="heteroscedastic multi-task phantom experiments")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("genphantom", help="generate a phantom dataset")
    common(p)
    p.add_argument("--cases", type=int, default=None)

    p = sub.add_parser("train", help="train a model variant")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("infer", help="MC-dropout sliding-window prediction")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-dir", required=True)
    p.add_argument("--split", default=None)

    for name in ("eval", "calibrate"):
        p = sub.add_parser(name, help=f"{name} predictions against references")
        common(p)
        p.add_argument("--manifest", required=True)
        p.add_argument("--pred-dir", required=True)

    p = sub.add_parser("report", help="merge per-variant reports")
    common(p)
    p.add_argument("--inputs", nargs="+", required=True,
                   help="per-variant report JSON files")
    return parser


_COMMANDS = {"genphantom": _cmd_genphantom, "train": _cmd_train,
             "infer": _cmd_infer, "eval": _cmd_eval,
             "calibrate": _cmd_calibrate, "report": _cmd_report}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        cfg = _load_config(args.config)
        _apply_overrides(cfg, extras)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"hetmt: error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args, cfg)
    except (HetmtError, OSError, json.JSONDecodeError, KeyError,
            TypeError, ValueError) as exc:
        print(f"hetmt: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
