"""Training objective: per-component SMSE/MSE mix, image formation, indirect supervision, refinement."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .autograd import DTYPE, Tensor, as_tensor, mul, square, tabs, tmean, tsum


@dataclass(frozen=True)
class LossWeights:
    gamma_smse: float = 0.95
    gamma_mse: float = 0.05
    w_rho: float = 1.0 / 3.0
    w_imf: float = 0.01
    w_is: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


def mse_t(pred: Tensor, gt: Tensor) -> Tensor:
    return tmean(square(pred - gt))


def smse_t(pred: Tensor, gt: Tensor) -> Tensor:
    """Scale-invariant MSE with one least-squares scale per image, differentiated through."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    axes = tuple(range(1, len(pred.shape)))
    num = tsum(mul(pred, gt), axis=axes)
    den = tsum(square(pred), axis=axes)
    nonzero = (den.data > 0).astype(DTYPE)
    alpha = num / (den + Tensor(1.0 - nonzero)) * Tensor(nonzero)
    return mse_t(alpha * pred, gt)


def combined_loss(pred: Tensor, gt: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    return weights.gamma_smse * smse_t(pred, gt) + weights.gamma_mse * mse_t(pred, gt)


def imf_loss(rho: Tensor, s_u: Tensor, image: Tensor) -> Tensor:
    """MSE between the re-rendered image rho * s_u and the input."""
    return mse_t(mul(rho, s_u), image)


def is_loss(s_u: Tensor, ambient: Tensor, shadow_mag: Tensor, gt_direct: Tensor) -> Tensor:
    """MSE of the direct shading implied by s_u, ambient and shadow magnitude.

    The shadow enters as a non-negative magnitude, so the physical ``s_u - e_a+ - e_a-``
    becomes ``s_u - ambient + shadow_mag``.
    """
    return mse_t(s_u - ambient + shadow_mag, as_tensor(gt_direct))


def refinement_loss_terms(rho_final: Tensor, rho_gt: Tensor) -> tuple[Tensor, Tensor]:
    """(L1 pixel loss, L2 loss on horizontal plus vertical forward differences)."""
    l1 = tmean(tabs(rho_final - rho_gt))
    dx_p = rho_final[:, :, :, 1:] - rho_final[:, :, :, :-1]
    dx_g = rho_gt[:, :, :, 1:] - rho_gt[:, :, :, :-1]
    dy_p = rho_final[:, :, 1:, :] - rho_final[:, :, :-1, :]
    dy_g = rho_gt[:, :, 1:, :] - rho_gt[:, :, :-1, :]
    grad = mse_t(dx_p, dx_g) if rho_final.shape[3] > 1 else Tensor(0.0)
    if rho_final.shape[2] > 1:
        grad = grad + mse_t(dy_p, dy_g)
    return l1, grad


def refinement_loss(rho_final: Tensor, rho_gt: Tensor) -> Tensor:
    l1, grad = refinement_loss_terms(rho_final, rho_gt)
    return l1 + grad


@dataclass
class Targets:
    """Ground truth for one batch, all N x C x H x W; shadow keeps its physical sign (<= 0)."""
    image: Tensor
    reflectance: Tensor
    shading_unified: Tensor
    shading_direct: Tensor
    ambient: Tensor
    shadow: Tensor

    @property
    def shadow_mag(self) -> Tensor:
        return Tensor(-self.shadow.data + DTYPE(0))


@dataclass
class LossBreakdown:
    terms: dict[str, Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> Tensor:
        out = None
        for name, t in self.terms.items():
            part = self.weights[name] * t
            out = part if out is None else out + part
        return out if out is not None else Tensor(0.0)

    def values(self) -> dict[str, float]:
        return {name: float(t.data) for name, t in self.terms.items()}

    def weighted_sum(self) -> float:
        return float(sum(self.weights[k] * float(t.data) for k, t in self.terms.items()))

    def record(self) -> dict[str, float]:
        out = {f"L_{k}": v for k, v in self.values().items()}
        out["total"] = float(self.total.data)
        return out


def generator_loss(outputs, targets: Targets, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Reflectance branches, unified shading, ambient, shadow, image formation and indirect supervision.

    ``outputs`` is a :class:`~shadingnet.model.ForwardOutputs`; the image-formation term uses
    its refined reflectance.
    """
    rho_gt = targets.reflectance
    shadow_mag_gt = targets.shadow_mag
    lb = LossBreakdown()
    for name in ("rho_u", "rho_amb", "rho_shad"):
        lb.terms[name] = combined_loss(getattr(outputs, name), rho_gt, weights)
        lb.weights[name] = weights.w_rho
    lb.terms["s_u"] = combined_loss(outputs.s_u, targets.shading_unified, weights)
    lb.terms["ambient"] = combined_loss(outputs.ambient, targets.ambient, weights)
    lb.terms["shadow"] = combined_loss(outputs.shadow_mag, shadow_mag_gt, weights)
    for name in ("s_u", "ambient", "shadow"):
        lb.weights[name] = 1.0
    lb.terms["imf"] = imf_loss(outputs.rho_final, outputs.s_u, targets.image)
    lb.weights["imf"] = weights.w_imf
    lb.terms["is"] = is_loss(outputs.s_u, outputs.ambient, outputs.shadow_mag, targets.shading_direct)
    lb.weights["is"] = weights.w_is
    return lb


def total_loss(outputs, targets: Targets, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Generator loss plus the unweighted refinement L1 and gradient terms."""
    lb = generator_loss(outputs, targets, weights)
    l1, grad = refinement_loss_terms(outputs.rho_final, targets.reflectance)
    lb.terms["refine_l1"] = l1
    lb.terms["refine_grad"] = grad
    lb.weights["refine_l1"] = 1.0
    lb.weights["refine_grad"] = 1.0
    return lb
