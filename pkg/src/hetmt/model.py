"""Dual-task fully convolutional network with a shared dilated trunk.

The trunk is a HighResNet-style stack: an initial 3x3 convolution, then
three groups of pre-activation residual blocks at dilations 1/2/4, then a
final 3x3 convolution and an elementwise dropout layer. Task branches hang
off the (dropped) trunk output:

  reg_mean    voxel-wise regression mean f1
  reg_logvar  voxel-wise log-variance s1 = log sigma1^2
  seg_logits  C-channel segmentation logits f2
  seg_logvar  voxel-wise log-variance s2

Model variants trim this down: the M1/M2a baselines keep half-width trunks
and a single linear 1x1 head per task, M2b adds the full heteroscedastic
branch pair for one task, M3 keeps both mean branches plus two learnable
scalar log-variances, M4 is the full model. All convolutions preserve the
spatial shape (zero padding, stride 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError

FORMAT_VERSION = 1

VARIANTS = ("M1_reg", "M1_seg", "M2a_reg", "M2a_seg", "M2b_reg", "M2b_seg",
            "M3_multitask_homo", "M4_multitask_hetero")

_ALIASES = {"M1": "M1_reg", "M2a": "M2a_reg", "M2b": "M2b_reg",
            "M3": "M3_multitask_homo", "M4": "M4_multitask_hetero"}

# Variance heads start wide open on the regression side (sigma^2 ~ e^8,
# matching the raw scale of squared CT residuals) and neutral on the
# segmentation side (cross-entropy is O(log C)).
REG_LOGVAR_INIT = 8.0
SEG_LOGVAR_INIT = 0.0


def canonical_variant(name: str) -> str:
    v = _ALIASES.get(name, name)
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return v


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale sizes."""

    trunk_features: tuple[int, ...] = (16, 16, 32, 64, 128)
    dilations: tuple[int, ...] = (1, 2, 4)
    repeats: int = 2
    kernel: int = 3
    branch_widths: tuple[int, ...] = (32, 32, 32, 32)
    dropout_p: float = 0.5
    num_classes: int = 6
    variant: str = "M4_multitask_hetero"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if len(self.trunk_features) != len(self.dilations) + 2:
            raise ConfigError(
                f"trunk_features needs {len(self.dilations) + 2} entries "
                f"(initial, one per dilation group, final), got "
                f"{len(self.trunk_features)}")
        if any(f < 1 for f in self.trunk_features):
            raise ConfigError("trunk widths must be positive")
        if len(self.branch_widths) != 4:
            raise ConfigError("branch_widths needs 4 entries (the final "
                              "layer width is the head's output count)")
        if any(w < 1 for w in self.branch_widths):
            raise ConfigError("branch widths must be positive")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    # Variant structure queries.
    @property
    def has_reg(self) -> bool:
        return self.variant in ("M1_reg", "M2a_reg", "M2b_reg",
                                "M3_multitask_homo", "M4_multitask_hetero")

    @property
    def has_seg(self) -> bool:
        return self.variant in ("M1_seg", "M2a_seg", "M2b_seg",
                                "M3_multitask_homo", "M4_multitask_hetero")

    @property
    def hetero_heads(self) -> bool:
        return self.variant in ("M2b_reg", "M2b_seg", "M4_multitask_hetero")

    @property
    def scalar_logvars(self) -> bool:
        return self.variant == "M3_multitask_homo"

    @property
    def uses_dropout(self) -> bool:
        return not self.variant.startswith("M1")

    @property
    def half_trunk(self) -> bool:
        return self.variant.startswith(("M1", "M2"))

    @property
    def simple_heads(self) -> bool:
        return self.variant.startswith(("M1", "M2a"))

    def trunk_widths(self) -> tuple[int, ...]:
        if self.half_trunk:
            return tuple(max(1, f // 2) for f in self.trunk_features)
        return self.trunk_features


@dataclass
class DualTaskOutput:
    """One forward pass; heads absent under the variant are None.

    Spatial maps are (N, H, W) for single-channel heads and (N, C, H, W)
    for the logits. Fields hold graph tensors during training and plain
    arrays under no_grad.
    """

    reg_mean: object = None
    reg_logvar: object = None
    seg_logits: object = None
    seg_logvar: object = None

    def numpy(self) -> "DualTaskOutput":
        def _data(v):
            return v.data if isinstance(v, ad.Tensor) else v
        return DualTaskOutput(*(_data(getattr(self, f)) for f in
                                ("reg_mean", "reg_logvar", "seg_logits", "seg_logvar")))


def _head_names(config: ModelConfig) -> list[str]:
    names = []
    if config.has_reg:
        names.append("reg_mean")
        if config.hetero_heads:
            names.append("reg_logvar")
    if config.has_seg:
        names.append("seg_logits")
        if config.hetero_heads:
            names.append("seg_logvar")
    return names


def _head_out_width(name: str, config: ModelConfig) -> int:
    return config.num_classes if name == "seg_logits" else 1


def _head_final_bias(name: str) -> float:
    if name == "reg_logvar":
        return REG_LOGVAR_INIT
    if name == "seg_logvar":
        return SEG_LOGVAR_INIT
    return 0.0


def build(config: ModelConfig, init_seed: int) -> dict:
    """Create the named parameter set, float32, deterministic in init_seed.

    Kernels are fan-in-scaled uniform draws, biases zero except variance
    head output biases, norm gains one.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([init_seed & 0xFFFFFFFFFFFFFFFF, 0x6D6F64])))
    params: dict[str, np.ndarray] = {}

    def add_conv(name: str, cin: int, cout: int, k: int, bias: float = 0.0):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        params[name + ".w"] = rng.uniform(
            -bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        params[name + ".b"] = np.full(cout, bias, dtype=np.float32)

    def add_norm(name: str, channels: int):
        params[name + ".gain"] = np.ones(channels, dtype=np.float32)
        params[name + ".bias"] = np.zeros(channels, dtype=np.float32)

    k = config.kernel
    widths = config.trunk_widths()
    add_conv("trunk.conv0", 1, widths[0], k)
    cin = widths[0]
    for g in range(len(config.dilations)):
        cout = widths[g + 1]
        for b in range(config.repeats):
            base = f"trunk.g{g}.b{b}"
            add_norm(base + ".norm0", cin)
            add_conv(base + ".conv0", cin, cout, k)
            add_norm(base + ".norm1", cout)
            add_conv(base + ".conv1", cout, cout, k)
            if cin != cout:
                add_conv(base + ".proj", cin, cout, 1)
            cin = cout
    add_norm("trunk.final.norm", cin)
    add_conv("trunk.final", cin, widths[-1], k)
    trunk_out = widths[-1]

    for head in _head_names(config):
        out_w = _head_out_width(head, config)
        final_bias = _head_final_bias(head)
        if config.simple_heads:
            add_conv(f"branch.{head}.conv0", trunk_out, out_w, 1, bias=final_bias)
        else:
            bw = config.branch_widths
            add_conv(f"branch.{head}.conv0", trunk_out, bw[0], k)
            add_conv(f"branch.{head}.conv1", bw[0], bw[1], k)
            add_conv(f"branch.{head}.conv2", bw[1], bw[2], 1)
            add_conv(f"branch.{head}.conv3", bw[2], bw[3], 1)
            add_conv(f"branch.{head}.conv4", bw[3], out_w, 1, bias=final_bias)

    if config.scalar_logvars:
        if config.has_reg:
            params["s1"] = np.asarray(REG_LOGVAR_INIT, dtype=np.float32)
        if config.has_seg:
            params["s2"] = np.asarray(SEG_LOGVAR_INIT, dtype=np.float32)
    return params


def _check_finite(name: str, t) -> None:
    data = t.data if isinstance(t, ad.Tensor) else t
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite activations in layer {name!r}")


def forward_tensors(params: dict, config: ModelConfig, x: np.ndarray,
                    mode: str = "deterministic", rng_seed: int | None = None,
                    check: bool = True) -> DualTaskOutput:
    """Run the network on a batch (N, 1, H, W), building the autodiff graph.

    ``params`` may hold arrays or Tensors; pass Tensors when gradients are
    wanted. Modes: "train" and "mc_sample" draw the dropout mask from
    rng_seed, "deterministic" applies no mask.
    """
    if mode not in ("train", "mc_sample", "deterministic"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    if mode != "deterministic" and config.uses_dropout and rng_seed is None:
        raise ConfigError(f"mode {mode!r} needs rng_seed for the dropout mask")
    if x.ndim != 4 or x.shape[1] != 1:
        raise ConfigError(f"expected input (N, 1, H, W), got {x.shape}")

    def P(name):
        p = params[name]
        return p if isinstance(p, ad.Tensor) else ad.Tensor(p)

    def conv(h, name, dilation=1):
        return ad.conv2d(h, P(name + ".w"), P(name + ".b"), dilation=dilation)

    def norm(h, name):
        return ad.instance_norm(h, P(name + ".gain"), P(name + ".bias"))

    h = conv(ad.Tensor(x), "trunk.conv0")
    widths = config.trunk_widths()
    cin = widths[0]
    for g, dil in enumerate(config.dilations):
        cout = widths[g + 1]
        for b in range(config.repeats):
            base = f"trunk.g{g}.b{b}"
            inp = h
            h = conv(ad.relu(norm(h, base + ".norm0")), base + ".conv0", dil)
            h = conv(ad.relu(norm(h, base + ".norm1")), base + ".conv1", dil)
            skip = inp if cin == cout else conv(inp, base + ".proj")
            h = h + skip
            cin = cout
    h = conv(ad.relu(norm(h, "trunk.final.norm")), "trunk.final")

    if mode != "deterministic" and config.uses_dropout and config.dropout_p > 0:
        p = config.dropout_p
        mask_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([rng_seed & 0xFFFFFFFFFFFFFFFF, 0x64726F70])))
        keep = (mask_rng.random(h.shape) >= p).astype(h.data.dtype) / (1.0 - p)
        h = h * ad.Tensor(keep)
    if check:
        _check_finite("trunk", h)

    n, _, hh, ww = x.shape
    out = DualTaskOutput()
    for head in _head_names(config):
        t = h
        if config.simple_heads:
            t = conv(t, f"branch.{head}.conv0")
        else:
            t = ad.relu(conv(t, f"branch.{head}.conv0"))
            t = ad.relu(conv(t, f"branch.{head}.conv1"))
            t = ad.relu(conv(t, f"branch.{head}.conv2"))
            t = ad.relu(conv(t, f"branch.{head}.conv3"))
            t = conv(t, f"branch.{head}.conv4")
        if _head_out_width(head, config) == 1:
            t = ad.reshape(t, (n, hh, ww))
        if check:
            _check_finite(head, t)
        setattr(out, head, t)
    return out


def forward(params: dict, config: ModelConfig, patch: np.ndarray,
            mode: str = "deterministic", rng_seed: int | None = None) -> DualTaskOutput:
    """Single-patch forward without a graph; returns numpy maps.

    ``patch`` is a 2D array (H, W); single-channel maps come back (H, W),
    logits (C, H, W).
    """
    patch = np.asarray(patch)
    if patch.ndim != 2:
        raise ConfigError(f"expected a 2D patch, got shape {patch.shape}")
    with ad.no_grad():
        out = forward_tensors(params, config, patch[None, None].astype(np.float32),
                              mode=mode, rng_seed=rng_seed).numpy()
    squeeze = lambda v: None if v is None else v[0]
    return DualTaskOutput(squeeze(out.reg_mean), squeeze(out.reg_logvar),
                          squeeze(out.seg_logits), squeeze(out.seg_logvar))


def _config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def _config_from_dict(d: dict) -> ModelConfig:
    cfg = ModelConfig(
        trunk_features=tuple(d["trunk_features"]),
        dilations=tuple(d["dilations"]),
        repeats=int(d["repeats"]),
        kernel=int(d["kernel"]),
        branch_widths=tuple(d["branch_widths"]),
        dropout_p=float(d["dropout_p"]),
        num_classes=int(d["num_classes"]),
        variant=str(d["variant"]),
    )
    cfg.validate()
    return cfg


def save_checkpoint(path, params: dict, config: ModelConfig, iteration: int,
                    init_seed: int) -> None:
    """Write params as one packed float32 payload plus a JSON header."""
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    tensors = []
    blobs = []
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float32)
        tensors.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {"format_version": FORMAT_VERSION, "config": _config_to_dict(config),
              "iteration": int(iteration), "init_seed": int(init_seed),
              "tensors": tensors}
    base.with_suffix(".bin").write_bytes(b"".join(blobs))
    base.with_suffix(".json").write_text(
        json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (params, config, iteration, init_seed).

    Tensor shapes are validated against a fresh build from the stored
    config, so a corrupted or mismatched payload fails loudly.
    """
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    header_path = base.with_suffix(".json")
    payload_path = base.with_suffix(".bin")
    if not header_path.exists():
        raise ConfigError(f"missing checkpoint header {header_path}")
    if not payload_path.exists():
        raise ConfigError(f"missing checkpoint payload {payload_path}")
    header = json.loads(header_path.read_text())
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format "
                          f"{header.get('format_version')!r} in {header_path}")
    config = _config_from_dict(header["config"])
    template = build(config, int(header["init_seed"]))
    raw = payload_path.read_bytes()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for spec in header["tensors"]:
        name = spec["name"]
        shape = tuple(spec["shape"])
        if name not in template:
            raise ConfigError(f"checkpoint tensor {name!r} not in config layout")
        if template[name].shape != shape:
            raise ConfigError(f"checkpoint tensor {name!r} has shape {shape}, "
                              f"config implies {template[name].shape}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise ConfigError(f"checkpoint payload too short at tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        params[name] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ConfigError(f"checkpoint payload has {len(raw) - offset} trailing bytes")
    if set(params) != set(template):
        missing = sorted(set(template) - set(params))
        raise ConfigError(f"checkpoint is missing tensors {missing}")
    return params, config, int(header["iteration"]), int(header["init_seed"])
