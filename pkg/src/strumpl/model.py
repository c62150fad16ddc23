"""Desk-scale network: shared residual conv encoder, per-variable regression
and imputation heads, a propensity (bias) head, and the learnable physics
module with its parametrised and MLP variants.

All heads predict in z-score space.  The physics module denormalises the
structural predictions to physical units, evaluates its variant in log-space,
clamps the output to the plausible biomass range and renormalises, so its
residual against the AGB head is comparable to the supervised loss.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .world import LOG_EPS, VARIABLES, NormStats

PHYSICS_VARIANTS = ("allometric", "allometric_no_wd", "power_law", "mlp")

EXPONENT_RAW_INIT = -4.0  # softplus(-4) ~ 0.018: near-flat powers at start
ALPHA_RAW_INIT = 21.0  # softplus(21) ~ 21: level term carries the initial output
SCALE_RAW_INIT = 0.0  # exp(0) = 1 for the allometric forms
MLP_WIDTH = 16

CHECKPOINT_MAGIC = b"STRM"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Invalid model configuration or checkpoint."""


@dataclass
class ModelConfig:
    C_in: int = 8
    K: int = 4
    D: int = 32
    encoder_blocks: int = 3
    physics_variant: str = "allometric_no_wd"
    pi_min: float = 0.1
    agb_clamp: tuple = (0.0, 2000.0)
    exponent_clamp: tuple = (-10.0, 10.0)
    phys_eps: float = LOG_EPS

    def __post_init__(self):
        if not 0.0 < self.pi_min < 1.0:
            raise ModelError(f"pi_min must be in (0,1), got {self.pi_min}")
        if self.D % 2 != 0:
            raise ModelError(f"feature width D must be even (heads halve it), got {self.D}")
        if self.agb_clamp[0] >= self.agb_clamp[1]:
            raise ModelError(f"invalid agb_clamp {self.agb_clamp}")
        if self.physics_variant not in PHYSICS_VARIANTS:
            raise ModelError(f"unknown physics_variant {self.physics_variant!r}")
        if self.physics_variant == "allometric" and self.K < 5:
            raise ModelError("the allometric variant consumes WD and requires K=5; "
                             "use allometric_no_wd for K=4")

    @property
    def variables(self) -> tuple:
        return VARIABLES[: self.K]

    @property
    def structural_vars(self) -> tuple:
        """Inputs consumed by the physics variant, in variable order."""
        if self.physics_variant == "allometric_no_wd":
            return ("H", "C", "SD")
        if self.physics_variant == "allometric":
            return ("H", "C", "SD", "WD")
        return tuple(v for v in self.variables if v != "AGB")


@dataclass
class ModelParams:
    """Named float64 arrays; order is fixed by construction."""

    config: ModelConfig
    arrays: dict = field(default_factory=dict)  # name -> np.ndarray

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def names(self) -> list:
        return list(self.arrays)

    def phi_names(self) -> list:
        return [n for n in self.arrays if n.startswith("phys.")]


@dataclass
class ModelOutputs:
    z: Tensor
    y_hat: Tensor | None
    m_hat: Tensor | None
    pi_hat: Tensor | None


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def _conv_init(rng, c_out: int, c_in: int, k: int) -> tuple:
    bound = 1.0 / np.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
    return w, np.zeros(c_out)


def _head_block(rng, prefix: str, d: int, out_channels: int, arrays: dict) -> None:
    w1, b1 = _conv_init(rng, d // 2, d, 3)
    w2, b2 = _conv_init(rng, out_channels, d // 2, 1)
    arrays[f"{prefix}.conv1.w"] = w1
    arrays[f"{prefix}.conv1.b"] = b1
    arrays[f"{prefix}.conv2.w"] = w2
    arrays[f"{prefix}.conv2.b"] = b2


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in-scaled uniform conv weights; physics exponent raws start at -4
    (near-flat powers) with the level terms set so the initial physical output
    lands in the low-20s regardless of input magnitudes."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    arrays: dict = {}

    w, b = _conv_init(rng, config.D, config.C_in, 3)
    arrays["encoder.stem.w"] = w
    arrays["encoder.stem.b"] = b
    for i in range(config.encoder_blocks):
        for conv in ("conv1", "conv2"):
            w, b = _conv_init(rng, config.D, config.D, 3)
            arrays[f"encoder.block{i}.{conv}.w"] = w
            arrays[f"encoder.block{i}.{conv}.b"] = b

    for var in config.variables:
        _head_block(rng, f"reg_head.{var}", config.D, 1, arrays)
    for var in config.variables:
        _head_block(rng, f"imp_head.{var}", config.D, 1, arrays)
    _head_block(rng, "bias_head", config.D, config.K, arrays)

    variant = config.physics_variant
    if variant in ("allometric", "allometric_no_wd"):
        arrays["phys.alpha_raw"] = np.asarray(ALPHA_RAW_INIT)
        arrays["phys.scale_raw"] = np.asarray(SCALE_RAW_INIT)
        for name in ("b", "c", "d") + (("e",) if variant == "allometric" else ()):
            arrays[f"phys.{name}_raw"] = np.asarray(EXPONENT_RAW_INIT)
    elif variant == "power_law":
        arrays["phys.scale_raw"] = np.asarray(np.log(ALPHA_RAW_INIT))
        for var in config.structural_vars:
            arrays[f"phys.e_{var}_raw"] = np.asarray(EXPONENT_RAW_INIT)
    else:  # mlp
        n = len(config.structural_vars)
        for name, (c_out, c_in) in {
            "l1": (MLP_WIDTH, n),
            "l2": (MLP_WIDTH, MLP_WIDTH),
            "l3": (1, MLP_WIDTH),
        }.items():
            w, b = _conv_init(rng, c_out, c_in, 1)
            arrays[f"phys.mlp.{name}.w"] = w
            arrays[f"phys.mlp.{name}.b"] = b

    return ModelParams(config=config, arrays=arrays)


def watch_params(params: ModelParams) -> dict:
    """Wrap every parameter as a leaf on the active tape (constants if none)."""
    return {name: T.leaf(arr) for name, arr in params.arrays.items()}


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _conv(pt: dict, prefix: str, x: Tensor, k: int) -> Tensor:
    return T.conv2d(x, pt[f"{prefix}.w"], pt[f"{prefix}.b"], padding=(k - 1) // 2)


def _encode(pt: dict, config: ModelConfig, x: Tensor) -> Tensor:
    h = _conv(pt, "encoder.stem", x, 3)
    for i in range(config.encoder_blocks):
        t = T.relu(_conv(pt, f"encoder.block{i}.conv1", h, 3))
        t = _conv(pt, f"encoder.block{i}.conv2", t, 3)
        h = T.relu(T.add(t, h))
    return h


def _head(pt: dict, prefix: str, z: Tensor) -> Tensor:
    a = T.relu(_conv(pt, f"{prefix}.conv1", z, 3))
    return _conv(pt, f"{prefix}.conv2", a, 1)


def forward(
    params: ModelParams,
    covariates,
    heads: tuple = ("reg", "imp", "bias"),
    param_tensors: dict | None = None,
) -> ModelOutputs:
    """Run the network on [C_in,H,W] or batched [N,C_in,H,W] covariates.

    ``heads`` selects which output heads to evaluate; skipped heads come back
    as None.  Pass ``param_tensors`` (from :func:`watch_params`) to reuse leaf
    tensors already registered on the active tape.
    """
    config = params.config
    x = covariates if isinstance(covariates, Tensor) else T.constant(covariates)
    if x.shape[-3] != config.C_in:
        raise ModelError(f"covariates have {x.shape[-3]} channels, config expects {config.C_in}")
    pt = watch_params(params) if param_tensors is None else param_tensors

    z = _encode(pt, config, x)
    y_hat = m_hat = pi_hat = None
    if "reg" in heads:
        y_hat = T.concat_channels([_head(pt, f"reg_head.{v}", z) for v in config.variables])
    if "imp" in heads:
        m_hat = T.concat_channels([_head(pt, f"imp_head.{v}", z) for v in config.variables])
    if "bias" in heads:
        pi_hat = T.sigmoid(_head(pt, "bias_head", z))
    return ModelOutputs(z=z, y_hat=y_hat, m_hat=m_hat, pi_hat=pi_hat)


# ---------------------------------------------------------------------------
# Physics module
# ---------------------------------------------------------------------------


def _positive(phi: dict, name: str) -> Tensor:
    if name == "scale":
        return T.exp(phi["phys.scale_raw"])
    return T.softplus(phi[f"phys.{name}_raw"])


def physics_forward(
    variant: str,
    phi_raw: dict,
    y_hat: Tensor,
    norm: NormStats,
    config: ModelConfig,
) -> Tensor:
    """Physics-implied AGB in z-score space, shaped [..., H, W].

    Pipeline: denormalise the structural rows of ``y_hat``, evaluate the
    variant in log-space with positive-transformed coefficients, clamp to the
    plausible physical range, and re-apply the AGB z-score.
    """
    if variant not in PHYSICS_VARIANTS:
        raise ModelError(f"unknown physics variant {variant!r}")
    if variant == "allometric" and config.K < 5:
        raise ModelError("allometric variant requires WD (K=5)")
    eps = config.phys_eps
    variables = config.variables

    def denorm_row(name: str) -> Tensor:
        row = variables.index(name)
        z = T.take_channel(y_hat, row)
        return T.add(T.mul(z, float(norm.std[row])), float(norm.mean[row]))

    if variant in ("allometric", "allometric_no_wd"):
        b = _positive(phi_raw, "b")
        c = _positive(phi_raw, "c")
        d = _positive(phi_raw, "d")
        log_h = T.log(T.add(T.softplus(denorm_row("H")), eps))
        log_c = T.log(T.add(T.softplus(denorm_row("C")), eps))
        interior = T.add(T.mul(b, log_h), T.mul(c, log_c))
        exponent = T.clamp(T.mul(T.softplus(denorm_row("SD")), d), *config.exponent_clamp)
        scaled = T.mul(_positive(phi_raw, "scale"), T.exp(T.mul(exponent, interior)))
        if variant == "allometric":
            e = _positive(phi_raw, "e")
            log_wd = T.log(T.add(T.softplus(denorm_row("WD")), eps))
            scaled = T.mul(scaled, T.exp(T.mul(e, log_wd)))
        agb_phys = T.add(_positive(phi_raw, "alpha"), scaled)
    elif variant == "power_law":
        log_sum = None
        for var in config.structural_vars:
            e_v = T.softplus(phi_raw[f"phys.e_{var}_raw"])
            term = T.mul(e_v, T.log(T.add(T.softplus(denorm_row(var)), eps)))
            log_sum = term if log_sum is None else T.add(log_sum, term)
        agb_phys = T.mul(_positive(phi_raw, "scale"), T.exp(log_sum))
    else:  # mlp on the denormalised structural pixel vector
        x = T.stack_channels([denorm_row(v) for v in config.structural_vars])
        a = T.relu(T.conv2d(x, phi_raw["phys.mlp.l1.w"], phi_raw["phys.mlp.l1.b"], 0))
        a = T.relu(T.conv2d(a, phi_raw["phys.mlp.l2.w"], phi_raw["phys.mlp.l2.b"], 0))
        agb_phys = T.take_channel(
            T.conv2d(a, phi_raw["phys.mlp.l3.w"], phi_raw["phys.mlp.l3.b"], 0), 0
        )

    clamped = T.clamp(agb_phys, *config.agb_clamp)
    agb_idx = variables.index("AGB")
    return T.mul(T.sub(clamped, float(norm.mean[agb_idx])), 1.0 / float(norm.std[agb_idx]))


# ---------------------------------------------------------------------------
# Parameter accounting and checkpoints
# ---------------------------------------------------------------------------


def count_params(params: ModelParams) -> dict:
    counts = {"encoder": 0, "regression_heads": 0, "imputation_heads": 0,
              "bias_head": 0, "physics": 0}
    for name, arr in params.arrays.items():
        if name.startswith("encoder."):
            counts["encoder"] += arr.size
        elif name.startswith("reg_head."):
            counts["regression_heads"] += arr.size
        elif name.startswith("imp_head."):
            counts["imputation_heads"] += arr.size
        elif name.startswith("bias_head."):
            counts["bias_head"] += arr.size
        else:
            counts["physics"] += arr.size
    counts["total"] = sum(counts.values())
    return counts


def model_config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["agb_clamp"] = list(config.agb_clamp)
    d["exponent_clamp"] = list(config.exponent_clamp)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["agb_clamp"] = tuple(d["agb_clamp"])
    d["exponent_clamp"] = tuple(d["exponent_clamp"])
    return ModelConfig(**d)


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(model_config_to_dict(params.config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params.arrays)))
        for name, arr in params.arrays.items():
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, blob_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    config = model_config_from_dict(json.loads(raw[offset : offset + blob_len].decode()))
    offset += blob_len
    (n_arrays,) = struct.unpack("<I", raw[offset : offset + 4])
    offset += 4

    expected = init_params(config, seed=0).arrays
    arrays: dict = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<I", raw[offset : offset + 4])
        offset += 4
        name = raw[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack("<I", raw[offset : offset + 4])
        offset += 4
        shape = struct.unpack(f"<{ndim}I", raw[offset : offset + 4 * ndim])
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
        if name not in expected:
            raise ModelError(f"{path}: unexpected parameter {name!r} for this config")
        if expected[name].shape != arr.shape:
            raise ModelError(
                f"{path}: parameter {name!r} has shape {arr.shape}, expected {expected[name].shape}"
            )
        arrays[name] = arr
    missing = set(expected) - set(arrays)
    if missing:
        raise ModelError(f"{path}: checkpoint is missing parameters {sorted(missing)}")
    return ModelParams(config=config, arrays={k: arrays[k] for k in expected})
