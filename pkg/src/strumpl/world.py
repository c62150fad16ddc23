"""Synthetic multi-variable forest worlds with a known generating process.

Each patch carries smooth latent fields for canopy height (H), cover (C),
stem density (SD) and optionally wood density (WD); aboveground biomass (AGB)
is computed from them through a fixed allometric family with known
coefficients.  Covariates are noisy nonlinear views of the latents plus a
terrain channel that drives the observation process, so both the true
regression function and the true labelling propensity are available to tests.

Label structure mirrors the two-source regime: GEDI-style patches carry sparse
random footprints on {H, C}; plot-style patches carry Bernoulli-masked labels
on {SD, AGB, WD?} with a terrain-dependent propensity (surveyors avoid rough
terrain, which correlates with tall, high-biomass stands).
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

VARIABLES = ("H", "C", "SD", "AGB", "WD")
GEDI_ROWS = (0, 1)  # H, C

LOG_EPS = 1e-6
AGB_RANGE = (0.0, 2000.0)

DATASET_MAGIC = b"STRW"
DATASET_VERSION = 1


class WorldError(ValueError):
    """Invalid world configuration or degenerate generated data."""


def plot_rows(k: int) -> tuple:
    """Row indices labelled by the plot source for a K-variable world."""
    return tuple(range(2, k))


def agb_row(k: int) -> int:
    return VARIABLES.index("AGB")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def default_true_phi() -> dict:
    return {"alpha": 0.9, "scale": 28.0, "b": 0.35, "c": 0.18, "d": 0.0022, "e": 0.25}


@dataclass
class MnarConfig:
    """Observation process for plot-source patches.

    The propensity is ``observable_fraction * sigmoid(-steepness * (terrain -
    midpoint))`` where terrain is the covariate channel at
    ``accessibility_channel`` (higher terrain cost means fewer labels).  The
    midpoint sits at the centre of the plot-patch terrain distribution so
    propensities span most of their available range.  With ``ignorable=False``
    an extra factor ``sigmoid(-kappa * (AGB - tau))`` couples labelling
    directly to the latent label, breaking ignorability.
    """

    accessibility_channel: int = 0
    steepness: float = 2.2
    midpoint: float = 0.5
    observable_fraction: float = 0.6
    ignorable: bool = True
    kappa: float = 0.02
    tau: float = 180.0


@dataclass
class WorldConfig:
    K: int = 4  # 5 with WD, 4 without
    C_in: int = 8
    patch_size: int = 16
    n_gedi: int = 128
    n_plot: int = 12
    true_phi: dict = field(default_factory=default_true_phi)
    mnar: MnarConfig = field(default_factory=MnarConfig)
    noise_sd: dict = field(
        default_factory=lambda: {"H": 0.5, "C": 0.02, "SD": 15.0, "WD": 0.02, "AGB": 0.4}
    )
    seed: int = 0
    generator_family: str = "allometric"  # or "power_law" for misspecification studies
    gedi_footprints: tuple = (4, 8)
    split_fractions: tuple = (0.70, 0.15, 0.15)

    def __post_init__(self):
        if self.K not in (4, 5):
            raise WorldError(f"K must be 4 or 5, got {self.K}")
        if self.n_gedi <= 0 or self.n_plot <= 0:
            raise WorldError("n_gedi and n_plot must both be positive")
        if self.n_gedi < self.n_plot:
            raise WorldError("expected the GEDI source to dominate: n_gedi >= n_plot")
        if any(v <= 0 for v in self.true_phi.values()):
            raise WorldError("true_phi components must be strictly positive")
        if self.generator_family not in ("allometric", "power_law"):
            raise WorldError(f"unknown generator_family {self.generator_family!r}")

    @property
    def variables(self) -> tuple:
        return VARIABLES[: self.K]


@dataclass
class Patch:
    covariates: np.ndarray  # [C_in, H, W], float64
    targets: np.ndarray  # [K, H, W], physical units
    mask: np.ndarray  # [K, H, W], {0,1}
    source: str  # "G" or "P"
    true_propensity: np.ndarray  # [K, H, W], generator-side truth


@dataclass
class NormStats:
    """Per-variable z-score statistics computed on labelled training pixels."""

    mean: np.ndarray  # [K]
    std: np.ndarray  # [K]

    def apply(self, y: np.ndarray) -> np.ndarray:
        shape = (-1,) + (1,) * (y.ndim - 1)
        return (y - self.mean.reshape(shape)) / self.std.reshape(shape)

    def invert(self, z: np.ndarray) -> np.ndarray:
        shape = (-1,) + (1,) * (z.ndim - 1)
        return z * self.std.reshape(shape) + self.mean.reshape(shape)

    def apply_row(self, y_row: np.ndarray, row: int) -> np.ndarray:
        return (y_row - self.mean[row]) / self.std[row]

    def invert_row(self, z_row: np.ndarray, row: int) -> np.ndarray:
        return z_row * self.std[row] + self.mean[row]


@dataclass
class Dataset:
    config: WorldConfig
    splits: dict  # split name -> list[Patch]
    norm: NormStats

    def patches(self, split: str) -> list:
        return self.splits[split]


# ---------------------------------------------------------------------------
# Numeric helpers (mirror the model-side transforms exactly)
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 20.0, x, np.log1p(np.exp(np.minimum(x, 20.0))))


def _bilinear_upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    """Upsample an (m, m) grid to (size, size) with separable linear interp."""
    m = coarse.shape[0]
    pos = np.linspace(0.0, m - 1.0, size)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, m - 1)
    frac = pos - lo
    rows = coarse[lo] * (1.0 - frac)[:, None] + coarse[hi] * frac[:, None]
    return rows[:, lo] * (1.0 - frac)[None, :] + rows[:, hi] * frac[None, :]


def true_allometry(
    h: np.ndarray,
    c: np.ndarray,
    sd: np.ndarray,
    wd: np.ndarray | None,
    phi: dict,
    family: str = "allometric",
) -> np.ndarray:
    """Noise-free generating equation in physical units (before the AGB clamp).

    The allometric family is ``alpha + scale * exp(sp(SD)*d * (b*log(sp(H)+eps)
    + c*log(sp(C)+eps))) * sp(WD)^e`` with the WD factor dropped when ``wd`` is
    None; the power-law family is a plain product of powers.
    """
    sp_h = _softplus(h)
    sp_c = _softplus(c)
    sp_sd = _softplus(sd)
    if family == "allometric":
        core = (phi["d"] * sp_sd) * (
            phi["b"] * np.log(sp_h + LOG_EPS) + phi["c"] * np.log(sp_c + LOG_EPS)
        )
        scaled = phi["scale"] * np.exp(core)
        if wd is not None:
            scaled = scaled * _softplus(wd) ** phi["e"]
        return phi["alpha"] + scaled
    if family == "power_law":
        log_term = (
            phi["b"] * np.log(sp_h + LOG_EPS)
            + phi["c"] * np.log(sp_c + LOG_EPS)
            + phi["d"] * np.log(sp_sd + LOG_EPS)
        )
        if wd is not None:
            log_term = log_term + phi["e"] * np.log(_softplus(wd) + LOG_EPS)
        return phi["scale"] * np.exp(log_term)
    raise WorldError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, size: int, coarse: int = 5) -> np.ndarray:
    base = _bilinear_upsample(rng.normal(size=(coarse, coarse)), size)
    return base + rng.normal() * 0.7  # patch-level offset widens cross-patch spread


def _generate_patch(config: WorldConfig, source: str, rng: np.random.Generator) -> Patch:
    n = config.patch_size
    k = config.K

    g_h = _smooth_field(rng, n)
    g_c = _smooth_field(rng, n)
    g_sd = _smooth_field(rng, n)
    g_wd = _smooth_field(rng, n)
    g_terrain = _smooth_field(rng, n)

    h = 2.0 + 38.0 * _sigmoid(0.9 * g_h)
    c = 0.05 + 0.90 * _sigmoid(0.9 * g_c)
    sd = 60.0 + 840.0 * _sigmoid(0.9 * g_sd)
    wd = 0.30 + 0.50 * _sigmoid(0.9 * g_wd)

    wd_in = wd if k == 5 else None
    agb_clean = true_allometry(h, c, sd, wd_in, config.true_phi, config.generator_family)

    nsd = config.noise_sd
    agb = agb_clean + rng.normal(size=(n, n)) * nsd.get("AGB", 0.0) * np.sqrt(
        np.maximum(agb_clean, 0.0)
    )
    agb = np.clip(agb, *AGB_RANGE)

    targets = np.zeros((k, n, n))
    targets[0] = np.maximum(h + rng.normal(size=(n, n)) * nsd.get("H", 0.0), 0.0)
    targets[1] = np.clip(c + rng.normal(size=(n, n)) * nsd.get("C", 0.0), 0.0, 1.0)
    targets[2] = np.maximum(sd + rng.normal(size=(n, n)) * nsd.get("SD", 0.0), 0.0)
    targets[3] = agb
    if k == 5:
        targets[4] = np.clip(wd + rng.normal(size=(n, n)) * nsd.get("WD", 0.0), 0.01, 1.5)

    # terrain cost is high for both extremes of stand structure: tall
    # old-growth sits on rough ground and degraded low stands lack access
    # routes, so both label-distribution tails are under-surveyed; the channel
    # is identical in distribution across sources (no source signature)
    agb_proxy = (agb_clean - 90.0) / 40.0
    terrain = (2.0 * np.maximum(agb_proxy - 0.4, 0.0)
               + 2.2 * np.maximum(-0.7 - agb_proxy, 0.0)
               + 0.5 * g_terrain - 0.3)

    cov = np.zeros((config.C_in, n, n))
    noise = lambda s: rng.normal(size=(n, n)) * s
    cov[config.mnar.accessibility_channel] = terrain
    views = [
        h / 20.0 - 1.0 + noise(0.1),
        2.0 * c - 1.0 + noise(0.1),
        np.log(sd) / 1.5 - 4.0 + noise(0.1),
        (h * c) / 18.0 - 1.0 + noise(0.1),
        np.sqrt(sd) / 12.0 - 1.5 + noise(0.1),
        (wd - 0.55) * 4.0 + noise(0.1) if k == 5 else h / 40.0 + c - 1.0 + noise(0.1),
        noise(1.0),  # pure nuisance channel
    ]
    free = [i for i in range(config.C_in) if i != config.mnar.accessibility_channel]
    for slot, view in zip(free, views):
        cov[slot] = view
    for slot in free[len(views):]:
        cov[slot] = noise(1.0)

    mask = np.zeros((k, n, n))
    prop = np.zeros((k, n, n))
    return Patch(covariates=cov, targets=targets, mask=mask, source=source, true_propensity=prop)


def _fill_observation(patch: Patch, config: WorldConfig, mnar: MnarConfig,
                      rng: np.random.Generator) -> None:
    n = config.patch_size
    k = config.K
    patch.mask[:] = 0.0
    patch.true_propensity[:] = 0.0
    if patch.source == "G":
        lo, hi = config.gedi_footprints
        count = int(rng.integers(lo, hi + 1))
        flat = rng.choice(n * n, size=count, replace=False)
        rate = (lo + hi) / 2.0 / (n * n)
        for row in GEDI_ROWS:
            patch.mask[row].flat[flat] = 1.0
            patch.true_propensity[row] = rate
        return
    terrain = patch.covariates[mnar.accessibility_channel]
    prop = mnar.observable_fraction * _sigmoid(-mnar.steepness * (terrain - mnar.midpoint))
    if not mnar.ignorable:
        prop = prop * _sigmoid(-mnar.kappa * (patch.targets[agb_row(k)] - mnar.tau))
    drawn = (rng.random((n, n)) < prop).astype(float)
    for row in plot_rows(k):
        patch.mask[row] = drawn
        patch.true_propensity[row] = prop


def apply_observation_process(dataset: Dataset, mnar: MnarConfig,
                              rng: np.random.Generator) -> Dataset:
    """Redraw masks and true propensities for every patch under ``mnar``."""
    out = Dataset(config=dataset.config, splits={}, norm=dataset.norm)
    for split, patches in dataset.splits.items():
        fresh = []
        for p in patches:
            q = Patch(
                covariates=p.covariates.copy(),
                targets=p.targets.copy(),
                mask=np.zeros_like(p.mask),
                source=p.source,
                true_propensity=np.zeros_like(p.true_propensity),
            )
            _fill_observation(q, dataset.config, mnar, rng)
            fresh.append(q)
        out.splits[split] = fresh
    out.norm = compute_norm_stats(out.splits["train"], dataset.config)
    return out


def _split_indices(n: int, fractions: tuple, rng: np.random.Generator) -> dict:
    order = rng.permutation(n)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    if n - n_train >= 2:
        n_val = max(n_val, 1)
    return {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }


def generate_world(config: WorldConfig) -> Dataset:
    """Deterministically generate a train/val/test dataset from ``config``."""
    if config.n_gedi + config.n_plot == 0:
        raise WorldError("degenerate config: zero patches")
    root = np.random.SeedSequence(config.seed)
    patch_seeds = root.spawn(config.n_gedi + config.n_plot)
    mask_seed, split_seed = root.spawn(2)

    patches = []
    for i in range(config.n_gedi):
        patches.append(_generate_patch(config, "G", np.random.default_rng(patch_seeds[i])))
    for j in range(config.n_plot):
        patches.append(
            _generate_patch(config, "P", np.random.default_rng(patch_seeds[config.n_gedi + j]))
        )

    mask_rng = np.random.default_rng(mask_seed)
    for p in patches:
        _fill_observation(p, config, config.mnar, mask_rng)

    split_rng = np.random.default_rng(split_seed)
    gedi = patches[: config.n_gedi]
    plot = patches[config.n_gedi :]
    splits = {"train": [], "val": [], "test": []}
    for group in (gedi, plot):
        idx = _split_indices(len(group), config.split_fractions, split_rng)
        for name in splits:
            splits[name].extend(group[i] for i in idx[name])

    norm = compute_norm_stats(splits["train"], config)
    return Dataset(config=config, splits=splits, norm=norm)


def compute_norm_stats(train_patches: list, config: WorldConfig) -> NormStats:
    """Per-variable mean/std over labelled training pixels only."""
    k = config.K
    mean = np.zeros(k)
    std = np.ones(k)
    for row in range(k):
        values = np.concatenate(
            [p.targets[row][p.mask[row] > 0] for p in train_patches]
        ) if train_patches else np.array([])
        if values.size < 2:
            raise WorldError(f"variable {VARIABLES[row]} has {values.size} labelled "
                             "training pixels; need at least 2")
        s = values.std()
        if s == 0.0:
            raise WorldError(f"variable {VARIABLES[row]} has zero variance on labelled pixels")
        mean[row] = values.mean()
        std[row] = s
    return NormStats(mean=mean, std=std)


# ---------------------------------------------------------------------------
# Observation-rate summaries (used by training diagnostics and tests)
# ---------------------------------------------------------------------------


def mean_plot_observation_rate(dataset: Dataset, split: str = "val") -> float:
    """Mean generator propensity over plot rows of plot-source patches."""
    rows = plot_rows(dataset.config.K)
    vals = [p.true_propensity[list(rows)] for p in dataset.splits[split] if p.source == "P"]
    if not vals:
        raise WorldError(f"split {split!r} has no plot-source patches")
    return float(np.mean(vals))


def true_mean_observation_rate(dataset: Dataset, split: str = "val",
                               source_share: float = 0.5) -> float:
    """Expected labelling rate of plot rows under source-balanced sampling.

    Covariates carry no source signature, so a pointwise-calibrated propensity
    head converges to ``P(source=P in a batch) * propensity`` on plot rows;
    with the 50/50 sampler that source share is one half.  This is the
    generator-side quantity a calibrated head's plot-row mean should match.
    """
    return source_share * mean_plot_observation_rate(dataset, split)


def labelling_rate_by_quantile(patches: list, k: int, n_quantiles: int = 5) -> np.ndarray:
    """Empirical AGB-row labelling rate per AGB quantile over plot patches."""
    row = agb_row(k)
    agb = np.concatenate([p.targets[row].ravel() for p in patches if p.source == "P"])
    lab = np.concatenate([p.mask[row].ravel() for p in patches if p.source == "P"])
    order = np.argsort(agb, kind="stable")
    bins = np.array_split(order, n_quantiles)
    return np.array([lab[b].mean() for b in bins])


# ---------------------------------------------------------------------------
# Dataset on-disk format
# ---------------------------------------------------------------------------


def _write_patch(path: Path, patch: Patch) -> None:
    k, h, w = patch.targets.shape
    c = patch.covariates.shape[0]
    header = DATASET_MAGIC + struct.pack(
        "<6I", DATASET_VERSION, 0 if patch.source == "G" else 1, k, c, h, w
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (patch.covariates, patch.targets, patch.mask, patch.true_propensity):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_patch(path: Path) -> Patch:
    raw = path.read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise WorldError(f"{path}: bad magic {raw[:4]!r}")
    version, source_code, k, c, h, w = struct.unpack("<6I", raw[4:28])
    if version != DATASET_VERSION:
        raise WorldError(f"{path}: unsupported version {version}")
    offset = 28
    arrays = []
    for shape in ((c, h, w), (k, h, w), (k, h, w), (k, h, w)):
        count = int(np.prod(shape))
        arrays.append(
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        )
        offset += count * 8
    return Patch(
        covariates=arrays[0],
        targets=arrays[1],
        mask=arrays[2],
        source="G" if source_code == 0 else "P",
        true_propensity=arrays[3],
    )


def config_to_dict(config: WorldConfig) -> dict:
    d = asdict(config)
    d["gedi_footprints"] = list(config.gedi_footprints)
    d["split_fractions"] = list(config.split_fractions)
    return d


def config_from_dict(d: dict) -> WorldConfig:
    d = copy.deepcopy(d)
    d["mnar"] = MnarConfig(**d["mnar"])
    d["gedi_footprints"] = tuple(d["gedi_footprints"])
    d["split_fractions"] = tuple(d["split_fractions"])
    return WorldConfig(**d)


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "STRW",
        "version": DATASET_VERSION,
        "variables": list(dataset.config.variables),
        "config": config_to_dict(dataset.config),
        "norm": {"mean": dataset.norm.mean.tolist(), "std": dataset.norm.std.tolist()},
        "splits": {},
    }
    counter = 0
    for split, patches in dataset.splits.items():
        names = []
        for patch in patches:
            name = f"patch_{counter:05d}.bin"
            _write_patch(directory / name, patch)
            names.append(name)
            counter += 1
        manifest["splits"][split] = names
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise WorldError(f"no manifest.json under {directory}")
    manifest = json.loads(manifest_path.read_text())
    config = config_from_dict(manifest["config"])
    splits = {
        split: [_read_patch(directory / name) for name in names]
        for split, names in manifest["splits"].items()
    }
    norm = NormStats(
        mean=np.asarray(manifest["norm"]["mean"]), std=np.asarray(manifest["norm"]["std"])
    )
    return Dataset(config=config, splits=splits, norm=norm)


def dataset_hash(directory) -> str:
    """Content hash over the manifest and every patch record."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for path in sorted(directory.glob("*")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
