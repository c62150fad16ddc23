"""Diagnostics: per-variable RMSE/bias, label-quantile stratification, paired
bootstrap comparison, propensity calibration and coefficient extraction.

Bias is signed as prediction minus label throughout (positive means
overestimation).  Quantile bins are rank-based so counts differ by at most one
for distinct-valued labels.  The paired bootstrap resamples pixel indices once
per iteration, applied to both error vectors, so sampling variability cancels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import ModelParams
from .trainer import predict
from .world import Dataset, NormStats

PHI_VARIABLE_OF = {"b": "H", "c": "C", "d": "SD", "e": "WD"}


class EvalError(ValueError):
    """Invalid evaluation inputs."""


@dataclass
class EvalConfig:
    n_quantiles: int = 5
    n_bootstrap: int = 10000
    calib_bins: int = 10
    target_variable: str = "AGB"
    seed: int = 0
    equal_count_bins: bool = False

    def __post_init__(self):
        if self.n_quantiles < 2:
            raise EvalError("n_quantiles must be at least 2")
        if self.n_bootstrap < 100:
            raise EvalError("n_bootstrap must be at least 100")


@dataclass
class CalibrationResult:
    rows: list  # dicts: bin_lo, bin_hi, mean_pi, rate, count
    monotone: bool
    pi_std: float


@dataclass
class BootstrapResult:
    delta: float
    ci_lo: float
    ci_hi: float
    p_value: float


@dataclass
class EvalReport:
    per_variable: dict  # var -> {"rmse": float, "bias": float}
    stratified: list = field(default_factory=list)  # per-bin dicts
    calibration: CalibrationResult | None = None
    bootstrap: BootstrapResult | None = None
    phi: dict | None = None


# ---------------------------------------------------------------------------
# Point metrics
# ---------------------------------------------------------------------------


def rmse_bias(predictions: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> tuple:
    """(rmse, signed bias) over masked pixels, physical units."""
    sel = np.asarray(mask) > 0
    if not sel.any():
        raise EvalError("rmse_bias: empty evaluation mask")
    err = np.asarray(predictions)[sel] - np.asarray(labels)[sel]
    return float(np.sqrt(np.mean(err**2))), float(np.mean(err))


def quantile_stratified(
    predictions: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
    n_quantiles: int = 5,
) -> list:
    """Per-label-quantile (rmse, bias, count) rows, rank-binned stably."""
    sel = np.asarray(mask) > 0
    pred = np.asarray(predictions)[sel]
    lab = np.asarray(labels)[sel]
    if lab.size < n_quantiles:
        raise EvalError(f"need at least {n_quantiles} labelled pixels, got {lab.size}")
    order = np.argsort(lab, kind="stable")
    rows = []
    for q, idx in enumerate(np.array_split(order, n_quantiles)):
        err = pred[idx] - lab[idx]
        rows.append({
            "quantile": q + 1,
            "label_lo": float(lab[idx].min()),
            "label_hi": float(lab[idx].max()),
            "rmse": float(np.sqrt(np.mean(err**2))),
            "bias": float(np.mean(err)),
            "count": int(idx.size),
        })
    return rows


# ---------------------------------------------------------------------------
# Paired bootstrap
# ---------------------------------------------------------------------------


def paired_bootstrap(
    errors_a: np.ndarray,
    errors_b: np.ndarray,
    n_iter: int = 10000,
    rng: np.random.Generator | None = None,
) -> BootstrapResult:
    """Distribution of rmse(A) - rmse(B) under shared pixel resampling.

    ``p_value`` is the one-sided probability of delta >= 0 with exact ties
    counted half, so comparing a run against itself yields exactly 0.5.
    """
    errors_a = np.asarray(errors_a, dtype=np.float64).ravel()
    errors_b = np.asarray(errors_b, dtype=np.float64).ravel()
    if errors_a.shape != errors_b.shape:
        raise EvalError(
            f"paired_bootstrap: length mismatch {errors_a.size} vs {errors_b.size}"
        )
    if rng is None:
        rng = np.random.default_rng(0)
    n = errors_a.size
    sq_a = errors_a**2
    sq_b = errors_b**2
    deltas = np.empty(n_iter)
    chunk = max(1, min(n_iter, 4_000_000 // max(n, 1)))
    done = 0
    while done < n_iter:
        m = min(chunk, n_iter - done)
        idx = rng.integers(0, n, size=(m, n))
        deltas[done : done + m] = np.sqrt(sq_a[idx].mean(axis=1)) - np.sqrt(
            sq_b[idx].mean(axis=1)
        )
        done += m
    ci_lo, ci_hi = np.percentile(deltas, [2.5, 97.5])
    p = (np.count_nonzero(deltas > 0) + 0.5 * np.count_nonzero(deltas == 0)) / n_iter
    point = float(np.sqrt(sq_a.mean()) - np.sqrt(sq_b.mean()))
    return BootstrapResult(delta=point, ci_lo=float(ci_lo), ci_hi=float(ci_hi), p_value=p)


# ---------------------------------------------------------------------------
# Propensity calibration
# ---------------------------------------------------------------------------


def calibration_curve(
    pi_hat: np.ndarray,
    r: np.ndarray,
    bins: int = 10,
    equal_count: bool = False,
) -> CalibrationResult:
    """Observed labelling rate per predicted-propensity bin.

    Default binning is fixed-width on [0,1]; ``equal_count`` switches to
    per-quantile bins of the predictions.  Empty bins are reported with count
    zero; the monotonicity flag looks at non-empty bins only.
    """
    pi = np.asarray(pi_hat, dtype=np.float64).ravel()
    rr = np.asarray(r, dtype=np.float64).ravel()
    if pi.size != rr.size:
        raise EvalError("calibration_curve: pi_hat and R must have equal sizes")
    if pi.size and (pi.min() <= 0.0 or pi.max() >= 1.0):
        raise EvalError("calibration_curve: propensities must lie strictly inside (0,1)")
    if equal_count:
        edges = np.quantile(pi, np.linspace(0.0, 1.0, bins + 1))
        edges[0], edges[-1] = 0.0, 1.0
    else:
        edges = np.linspace(0.0, 1.0, bins + 1)
    rows = []
    rates = []
    for i in range(bins):
        top = pi <= edges[i + 1] if i == bins - 1 else pi < edges[i + 1]
        sel = (pi >= edges[i]) & top
        count = int(sel.sum())
        row = {
            "bin_lo": float(edges[i]),
            "bin_hi": float(edges[i + 1]),
            "mean_pi": float(pi[sel].mean()) if count else float("nan"),
            "rate": float(rr[sel].mean()) if count else float("nan"),
            "count": count,
        }
        rows.append(row)
        if count:
            rates.append(row["rate"])
    monotone = bool(np.all(np.diff(rates) >= 0)) if len(rates) > 1 else True
    return CalibrationResult(rows=rows, monotone=monotone, pi_std=float(pi.std()))


# ---------------------------------------------------------------------------
# Coefficient extraction and loss-spike counting
# ---------------------------------------------------------------------------


def extract_phi(params: ModelParams, variant: str | None = None) -> dict:
    """Positive-transformed physics coefficients with their attached variables."""
    variant = variant or params.config.physics_variant
    if variant == "mlp":
        return {"interpretable": False, "variant": "mlp"}
    out = {"interpretable": True, "variant": variant, "coefficients": {}, "attached": {}}
    for name, arr in params.arrays.items():
        if not name.startswith("phys."):
            continue
        key = name[len("phys."):-len("_raw")]
        if key == "scale":
            value = float(np.exp(arr))
        else:
            value = float(T.softplus(T.Tensor(arr)).values)
        out["coefficients"][key] = value
        if key.startswith("e_"):
            out["attached"][key] = key[2:]
        elif key in PHI_VARIABLE_OF:
            out["attached"][key] = PHI_VARIABLE_OF[key]
    return out


def count_loss_spikes(
    losses, window: int = 50, factor: float = 10.0, min_history: int = 10
) -> int:
    """Steps whose batch loss exceeds ``factor`` times the trailing median."""
    losses = np.asarray(list(losses), dtype=np.float64)
    spikes = 0
    for t in range(min_history, losses.size):
        med = np.median(losses[max(0, t - window) : t])
        if losses[t] > factor * med:
            spikes += 1
    return spikes


# ---------------------------------------------------------------------------
# Whole-model evaluation
# ---------------------------------------------------------------------------


def predict_physical(params: ModelParams, patches: list, norm: NormStats) -> np.ndarray:
    """[N,K,H,W] regression predictions denormalised to physical units."""
    z = predict(params, patches)["reg"]
    return norm.invert(z.transpose(1, 0, 2, 3)).transpose(1, 0, 2, 3)


def evaluate_model(
    params: ModelParams,
    dataset: Dataset,
    split: str = "test",
    config: EvalConfig | None = None,
    baseline_errors: np.ndarray | None = None,
) -> EvalReport:
    """Population-level report on a split (all pixels carry generator truth)."""
    config = config or EvalConfig()
    patches = dataset.splits[split]
    preds = predict_physical(params, patches, dataset.norm)
    labels = np.stack([p.targets for p in patches])

    per_variable = {}
    for row, var in enumerate(params.config.variables):
        r, b = rmse_bias(preds[:, row], labels[:, row], np.ones_like(labels[:, row]))
        per_variable[var] = {"rmse": r, "bias": b}

    target = params.config.variables.index(config.target_variable)
    stratified = quantile_stratified(
        preds[:, target], labels[:, target], np.ones_like(labels[:, target]),
        config.n_quantiles,
    )

    pi = predict(params, patches, heads=("bias",))["bias"]
    masks = np.stack([p.mask for p in patches])
    calibration = calibration_curve(
        np.clip(pi, 1e-12, 1 - 1e-12), masks, config.calib_bins, config.equal_count_bins
    )

    bootstrap = None
    if baseline_errors is not None:
        errors = (preds[:, target] - labels[:, target]).ravel()
        bootstrap = paired_bootstrap(
            errors, baseline_errors, config.n_bootstrap,
            np.random.default_rng(config.seed),
        )

    return EvalReport(
        per_variable=per_variable,
        stratified=stratified,
        calibration=calibration,
        bootstrap=bootstrap,
        phi=extract_phi(params),
    )


def target_errors(params: ModelParams, dataset: Dataset, split: str = "test",
                  variable: str = "AGB") -> np.ndarray:
    """Flat per-pixel signed errors for the target variable on a split."""
    patches = dataset.splits[split]
    preds = predict_physical(params, patches, dataset.norm)
    labels = np.stack([p.targets for p in patches])
    row = params.config.variables.index(variable)
    return (preds[:, row] - labels[:, row]).ravel()


# ---------------------------------------------------------------------------
# CSV serialisation
# ---------------------------------------------------------------------------

_FLOAT = "{:.17g}"


def _write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                _FLOAT.format(v) if isinstance(v, float) else v for v in row
            ])


def write_eval_report(report: EvalReport, directory) -> Path:
    """Fixed-name CSV tables: per_variable, stratified, calibration, bootstrap,
    phi and a one-line summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    _write_csv(
        directory / "per_variable.csv",
        ["variable", "rmse", "bias"],
        [[var, m["rmse"], m["bias"]] for var, m in report.per_variable.items()],
    )
    if report.stratified:
        _write_csv(
            directory / "stratified.csv",
            ["quantile", "label_lo", "label_hi", "rmse", "bias", "count"],
            [[r["quantile"], r["label_lo"], r["label_hi"], r["rmse"], r["bias"],
              r["count"]] for r in report.stratified],
        )
    if report.calibration is not None:
        _write_csv(
            directory / "calibration.csv",
            ["bin_lo", "bin_hi", "mean_pi", "rate", "count"],
            [[r["bin_lo"], r["bin_hi"], r["mean_pi"], r["rate"], r["count"]]
             for r in report.calibration.rows],
        )
    if report.bootstrap is not None:
        _write_csv(
            directory / "bootstrap.csv",
            ["delta_rmse", "ci_lo", "ci_hi", "p_value"],
            [[report.bootstrap.delta, report.bootstrap.ci_lo,
              report.bootstrap.ci_hi, report.bootstrap.p_value]],
        )
    if report.phi is not None and report.phi.get("interpretable"):
        _write_csv(
            directory / "phi.csv",
            ["coefficient", "value", "variable"],
            [[k, v, report.phi["attached"].get(k, "")]
             for k, v in report.phi["coefficients"].items()],
        )

    summary_rows = [["agb_rmse", report.per_variable["AGB"]["rmse"]],
                    ["agb_bias", report.per_variable["AGB"]["bias"]]]
    if report.calibration is not None:
        summary_rows.append(["calibration_monotone", int(report.calibration.monotone)])
        summary_rows.append(["pi_std", report.calibration.pi_std])
    _write_csv(directory / "summary.csv", ["metric", "value"], summary_rows)
    return directory
