"""The five-term training objective.

``l_sup`` supervises the regression heads through an AIPW pseudo-outcome (or
its naive / IPW substitutes), with stop-gradients on the clamped propensity
and on the imputation baseline so that those heads are trained only by their
own losses.  ``l_phys`` ties the AGB head to the physics module's output at
every pixel.  ``l_bias`` trains the propensity head against the observation
mask, ``l_imp`` trains the imputation heads on labelled pixels, and ``l_cons``
penalises prediction drift under input perturbation.  The physics weight
follows a linear curriculum over early epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import ModelOutputs, ModelParams, physics_forward
from .tensor import Tensor
from .world import NormStats

BCE_CLAMP = 1e-7  # float64-safe probability floor for the propensity BCE


class LossError(ValueError):
    """Loss configuration inconsistent with the available model outputs."""


@dataclass
class LossConfig:
    sup_mode: str = "aipw"  # naive | ipw | aipw
    detach_pi: bool = True
    detach_mu: bool = True
    pi_min: float = 0.1
    lambda_phys_start: float = 0.05
    lambda_phys_end: float = 0.1
    t_phys: int = 20  # epochs over which the physics weight ramps
    lambda_cons: float = 0.1
    lambda_bias: float = 0.1
    lambda_imp: float = 1.0
    aug_sigma: float = 0.05
    aug_pdrop: float = 0.05

    def __post_init__(self):
        if self.sup_mode not in ("naive", "ipw", "aipw"):
            raise LossError(f"unknown sup_mode {self.sup_mode!r}")
        if not 0.0 < self.pi_min <= 1.0:
            raise LossError(f"pi_min must be in (0,1], got {self.pi_min}")
        for name in ("lambda_phys_start", "lambda_phys_end", "lambda_cons",
                     "lambda_bias", "lambda_imp"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be non-negative")
        if self.lambda_phys_start > self.lambda_phys_end:
            raise LossError("lambda_phys_start must not exceed lambda_phys_end")
        if self.aug_sigma < 0 or not 0.0 <= self.aug_pdrop < 1.0:
            raise LossError("invalid augmentation parameters")


@dataclass
class LossBundle:
    l_sup: Tensor
    l_phys: Tensor
    l_cons: Tensor
    l_bias: Tensor
    l_imp: Tensor
    total: Tensor
    lambda_phys_effective: float
    notes: tuple = field(default=())

    def component_values(self) -> dict:
        return {
            "l_sup": float(self.l_sup.values),
            "l_phys": float(self.l_phys.values),
            "l_cons": float(self.l_cons.values),
            "l_bias": float(self.l_bias.values),
            "l_imp": float(self.l_imp.values),
            "total": float(self.total.values),
        }


def required_heads(config: LossConfig) -> tuple:
    """Heads the forward pass must evaluate for this loss configuration."""
    heads = ["reg"]
    if config.lambda_imp > 0 or config.sup_mode == "aipw":
        heads.append("imp")
    if config.lambda_bias > 0 or config.sup_mode in ("ipw", "aipw"):
        heads.append("bias")
    return tuple(heads)


def sanitize_labels(y: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Zero label entries wherever the mask is off so NaNs cannot propagate."""
    return np.where(r > 0, np.nan_to_num(np.asarray(y, dtype=np.float64)), 0.0)


# ---------------------------------------------------------------------------
# Supervised term
# ---------------------------------------------------------------------------


def clamped_propensity(pi_hat: Tensor, config: LossConfig) -> Tensor:
    pi_t = T.clamp(pi_hat, config.pi_min, 1.0)
    return T.detach(pi_t) if config.detach_pi else pi_t


def pseudo_outcome(y, r, m_hat: Tensor, pi_hat: Tensor, config: LossConfig) -> Tensor:
    """mu + (R / pi_tilde) * (y - mu), with the configured stop-gradients."""
    r = np.asarray(r, dtype=np.float64)
    y_san = T.constant(sanitize_labels(y, r))
    pi_t = clamped_propensity(pi_hat, config)
    mu = T.detach(m_hat) if config.detach_mu else m_hat
    weight = T.div(T.constant(r), pi_t)
    return T.add(mu, T.mul(weight, T.sub(y_san, mu)))


def sup_loss(y_hat: Tensor, y_tilde: Tensor) -> Tensor:
    """Pixel-wise MSE between the regression output and the pseudo-outcome."""
    diff = T.sub(y_hat, y_tilde)
    return T.mean(T.mul(diff, diff))


def supervised_loss(
    y_hat: Tensor,
    y,
    r,
    m_hat: Tensor | None,
    pi_hat: Tensor | None,
    config: LossConfig,
) -> tuple:
    """Dispatch on sup_mode; returns (loss, notes)."""
    r = np.asarray(r, dtype=np.float64)
    notes = ()
    if config.sup_mode == "naive":
        if r.sum() == 0:
            notes = ("no labels in batch",)
        return T.masked_mean_sq(y_hat, T.constant(sanitize_labels(y, r)), r), notes
    if config.sup_mode == "ipw":
        if pi_hat is None:
            raise LossError("ipw supervision requires the bias head output")
        weight = T.div(T.constant(r), clamped_propensity(pi_hat, config))
        diff = T.sub(y_hat, T.constant(sanitize_labels(y, r)))
        return T.mean(T.mul(weight, T.mul(diff, diff))), notes
    if m_hat is None or pi_hat is None:
        raise LossError("aipw supervision requires imputation and bias head outputs")
    return sup_loss(y_hat, pseudo_outcome(y, r, m_hat, pi_hat, config)), notes


# ---------------------------------------------------------------------------
# Auxiliary terms
# ---------------------------------------------------------------------------


def phys_loss(y_hat_agb: Tensor, agb_phys_norm: Tensor) -> Tensor:
    """Pixelwise MSE over all pixels, labelled or not (both in z-space)."""
    diff = T.sub(y_hat_agb, agb_phys_norm)
    return T.mean(T.mul(diff, diff))


def bias_loss(pi_hat: Tensor, r) -> Tensor:
    """Mean BCE of the raw propensities against the observation mask."""
    r = np.asarray(r, dtype=np.float64)
    return T.bce(T.clamp(pi_hat, BCE_CLAMP, 1.0 - BCE_CLAMP), r)


def imp_loss(m_hat: Tensor, y, r) -> Tensor:
    """Masked MSE on labelled pixels only; trains the imputation heads."""
    r = np.asarray(r, dtype=np.float64)
    return T.masked_mean_sq(m_hat, T.constant(sanitize_labels(y, r)), r)


def augment_covariates(x: np.ndarray, config: LossConfig, rng: np.random.Generator):
    keep = (rng.random(x.shape) >= config.aug_pdrop).astype(np.float64)
    noise = rng.normal(size=x.shape) * config.aug_sigma
    return x * keep + noise


def cons_loss(
    params: ModelParams,
    covariates: np.ndarray,
    y_hat: Tensor,
    config: LossConfig,
    rng: np.random.Generator,
    param_tensors: dict | None = None,
) -> Tensor:
    """Consistency between predictions on x and on a perturbed view x'.

    The perturbed forward evaluates the regression heads only.  Normalised per
    pixel (summed over the K variables), matching the supervised-objective
    convention that every variable contributes at every pixel.
    """
    from .model import forward  # local import to avoid a cycle at module load

    x_aug = augment_covariates(np.asarray(covariates, dtype=np.float64), config, rng)
    out_aug = forward(params, x_aug, heads=("reg",), param_tensors=param_tensors)
    diff = T.sub(y_hat, out_aug.y_hat)
    k = y_hat.shape[-3]
    return T.mul(T.mean(T.mul(diff, diff)), float(k))


def lambda_phys_schedule(epoch: int, config: LossConfig) -> float:
    """Linear ramp from the start weight to the end weight over t_phys epochs."""
    if epoch < 0:
        raise LossError(f"epoch must be non-negative, got {epoch}")
    if config.t_phys <= 0 or epoch >= config.t_phys:
        return config.lambda_phys_end
    frac = epoch / config.t_phys
    return config.lambda_phys_start + frac * (config.lambda_phys_end - config.lambda_phys_start)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

_ZERO = lambda: Tensor(np.asarray(0.0))


def total_loss(
    outputs: ModelOutputs,
    targets_z,
    mask,
    covariates,
    params: ModelParams,
    norm: NormStats,
    epoch: int,
    config: LossConfig,
    rng: np.random.Generator | None = None,
    param_tensors: dict | None = None,
) -> LossBundle:
    """Compose the five terms; components with a zero weight are skipped.

    ``targets_z`` are z-scored labels, ``mask`` the observation mask, both
    shaped like ``outputs.y_hat`` ([K,H,W] or batched [N,K,H,W]).
    """
    mask = np.asarray(mask, dtype=np.float64)
    l_sup, notes = supervised_loss(
        outputs.y_hat, targets_z, mask, outputs.m_hat, outputs.pi_hat, config
    )
    lam_phys = lambda_phys_schedule(epoch, config)

    if lam_phys > 0:
        phi = {k: v for k, v in (param_tensors or {}).items() if k.startswith("phys.")}
        if not phi:
            phi = {k: T.constant(v) for k, v in params.arrays.items() if k.startswith("phys.")}
        agb_idx = params.config.variables.index("AGB")
        agb_phys = physics_forward(
            params.config.physics_variant, phi, outputs.y_hat, norm, params.config
        )
        l_phys = phys_loss(T.take_channel(outputs.y_hat, agb_idx), agb_phys)
    else:
        l_phys = _ZERO()

    if config.lambda_cons > 0:
        if rng is None:
            raise LossError("consistency loss is enabled but no rng was provided")
        l_cons = cons_loss(params, covariates, outputs.y_hat, config, rng, param_tensors)
    else:
        l_cons = _ZERO()

    l_bias = bias_loss(outputs.pi_hat, mask) if config.lambda_bias > 0 else _ZERO()

    if config.lambda_imp > 0:
        if mask.sum() == 0 and "no labels in batch" not in notes:
            notes = notes + ("no labels in batch",)
        l_imp = imp_loss(outputs.m_hat, targets_z, mask)
    else:
        l_imp = _ZERO()

    total = l_sup
    for lam, term in ((lam_phys, l_phys), (config.lambda_cons, l_cons),
                      (config.lambda_bias, l_bias), (config.lambda_imp, l_imp)):
        if lam > 0:
            total = T.add(total, T.mul(term, lam))
    return LossBundle(
        l_sup=l_sup, l_phys=l_phys, l_cons=l_cons, l_bias=l_bias, l_imp=l_imp,
        total=total, lambda_phys_effective=lam_phys, notes=notes,
    )
