"""Training objectives: soft-label contrastive, MSE, modality composites,
reconstruction, cycle consistency, and the weighted total.

The contrastive term uses soft targets from target-target similarities:

    L(p, t) = - sum_i sum_j softmax_j(t_i . t_j / tau) * log softmax_j(p_i . t_j / tau)

summed (not averaged) over the batch, with log-sum-exp stabilization. The
MSE-style terms average over all elements (samples x features) so the
relative loss weights stay meaningful across configurable dimensions.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, NormalizationError, NumericalError, ParameterError
from .numerics import Var, as_var


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four loss terms in the training total."""

    w_image: float = 1.0
    w_text: float = 1e4
    w_rec: float = 1.0
    w_cyc: float = 1.0

    def validate(self) -> None:
        for name, value in vars(self).items():
            if value < 0:
                raise ParameterError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossReport:
    """Per-term loss values and the weighted total for one step."""

    image: float
    text: float
    rec: float
    cyc: float
    total: float
    step: int = 0

    CSV_HEADER = "step,image,text,rec,cyc,total"

    def csv_row(self) -> str:
        return f"{self.step},{self.image!r},{self.text!r},{self.rec!r},{self.cyc!r},{self.total!r}"


def _check_same_shape(p: Var, t: Var, op: str) -> None:
    if p.value.shape != t.value.shape:
        raise DimensionError(f"{op} requires equal shapes, got {p.value.shape} vs {t.value.shape}")


def flatten_normalize(x) -> Var:
    """Flatten token grids to one row per sample and L2-normalize the rows."""
    x = as_var(x)
    n = x.value.shape[0]
    flat = nm.reshape(x, (n, -1)) if x.value.ndim != 2 else x
    sq = nm.vsum(flat * flat, axis=1, keepdims=True)
    norms = np.sqrt(sq.value[:, 0])
    if np.any(norms < 1e-12):
        raise NormalizationError("cannot L2-normalize a zero-norm row")
    return flat / nm.vsqrt(sq)


def _softmax_rows(logits: Var) -> Var:
    return nm.vexp(logits - nm.logsumexp(logits, axis=1, keepdims=True))


def soft_clip_loss(p, t, tau: float) -> Var:
    """Soft-label batch contrastive loss over flattened, L2-normalized rows."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    p = as_var(p)
    t = as_var(t, like=p)
    if p.value.ndim != 2 or t.value.ndim != 2:
        raise DimensionError("soft_clip_loss expects 2-D (batch x features) inputs")
    _check_same_shape(p, t, "soft_clip_loss")
    for name, arr in (("p", p.value), ("t", t.value)):
        if np.any(np.sqrt((arr * arr).sum(axis=1)) < 1e-12):
            raise NormalizationError(f"soft_clip_loss: zero-norm row in {name}")
    inv_tau = 1.0 / tau
    logits_p = nm.matmul(p, nm.transpose(t)) * inv_tau
    logits_t = nm.matmul(t, nm.transpose(t)) * inv_tau
    log_pred = logits_p - nm.logsumexp(logits_p, axis=1, keepdims=True)
    soft_targets = _softmax_rows(logits_t)
    return -nm.vsum(soft_targets * log_pred)


def mse_loss(p, t) -> Var:
    """Mean of squared differences over all elements."""
    p = as_var(p)
    t = as_var(t, like=p)
    _check_same_shape(p, t, "mse_loss")
    diff = p - t
    return nm.mean_all(diff * diff)


def modality_loss(pred, target, tau: float, include_mse: bool = True, normalize: bool = True) -> Var:
    """Contrastive + MSE composite for one modality's token grid."""
    pred = as_var(pred)
    target = as_var(target, like=pred)
    _check_same_shape(pred, target, "modality_loss")
    if normalize:
        p_rows = flatten_normalize(pred)
        t_rows = flatten_normalize(target)
    else:
        n = pred.value.shape[0]
        p_rows = nm.reshape(pred, (n, -1))
        t_rows = nm.reshape(target, (n, -1))
    loss = soft_clip_loss(p_rows, t_rows, tau)
    if include_mse:
        loss = loss + mse_loss(pred, target)
    return loss


def recon_loss(v_hat, v) -> Var:
    """Autoencoder reconstruction error of pooled voxels."""
    return mse_loss(v_hat, v)


def cycle_loss(e_a, e_b) -> Var:
    """Consistency between embeddings at the two ends of a cross-subject cycle.

    Gradients flow into both branches; no stop-gradient is inserted.
    """
    return mse_loss(e_b, e_a)


def total_loss(
    image: Var | None,
    text: Var | None,
    rec: Var | None,
    cyc: Var | None,
    weights: LossWeights,
    step: int = 0,
) -> tuple[Var, LossReport]:
    """Weighted sum of the four terms; gated terms (None or weight 0) count as 0.

    Raises NumericalError naming the offending term if any component is not
    finite.
    """
    weights.validate()
    terms = {"image": (image, weights.w_image), "text": (text, weights.w_text),
             "rec": (rec, weights.w_rec), "cyc": (cyc, weights.w_cyc)}
    values = {}
    total: Var | None = None
    for name, (term, weight) in terms.items():
        if term is None:
            values[name] = 0.0
            continue
        value = float(term.value)
        if not math.isfinite(value):
            raise NumericalError(f"loss term '{name}' is non-finite ({value}) at step {step}")
        values[name] = value
        if weight == 0.0:
            continue
        weighted = term * weight
        total = weighted if total is None else total + weighted
    if total is None:
        total = Var(np.zeros(()))
    total_value = float(total.value)
    if not math.isfinite(total_value):
        raise NumericalError(f"total loss is non-finite at step {step}")
    report = LossReport(
        image=values["image"], text=values["text"], rec=values["rec"], cyc=values["cyc"],
        total=weights.w_image * values["image"] + weights.w_text * values["text"]
        + weights.w_rec * values["rec"] + weights.w_cyc * values["cyc"],
        step=step,
    )
    return total, report
