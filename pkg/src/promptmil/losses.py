"""Alignment contrastive loss, total objective, and test-time prediction.

The single loss form is a temperature-scaled negative log-likelihood over
cosine similarities, one-directional (image -> text). The total objective
adds the slide-example and patch-example alignment terms with weights
lambda1/lambda2; temperature is shared and stored as log(tau).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TAU_MIN = 5e-3
TAU_MAX = 5.0


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau_init: float = 0.07
    symmetric: bool = False   # optional image<->text variant, off by default

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise LossError("loss weights must be non-negative")
        if not (TAU_MIN <= self.tau_init <= TAU_MAX):
            raise LossError(f"tau_init outside [{TAU_MIN}, {TAU_MAX}]")


@dataclass
class SurvivalRecord:
    time: float
    event: int

    def __post_init__(self):
        if self.time <= 0:
            raise LossError(f"survival time must be positive, got {self.time}")
        self.event = int(self.event)
        if self.event not in (0, 1):
            raise LossError(f"event must be 0 or 1, got {self.event}")


def _check_unit_rows(t: Tensor, what: str) -> None:
    norms = np.linalg.norm(t.data, axis=1)
    off = np.abs(norms - 1.0).max(initial=0.0)
    if off > 1e-6:
        raise LossError(f"{what} rows must be unit-norm (worst deviation "
                        f"{off:.2e})")


def ac_loss(feats: Tensor, class_feats: Tensor, labels: Sequence[int],
            log_tau: Tensor) -> Tensor:
    """Mean over rows of -log softmax(cos(F_b, T_*) / tau)[y_b].

    Both feature matrices must have unit rows so the matmul is exactly the
    cosine; tau enters as exp(-log_tau) through the graph so it trains.
    """
    _check_unit_rows(feats, "image features")
    _check_unit_rows(class_feats, "class text features")
    b, u = feats.shape[0], class_feats.shape[0]
    labels = list(labels)
    if len(labels) != b:
        raise LossError(f"{b} feature rows but {len(labels)} labels")
    cos = ad.matmul_t(feats, class_feats)
    inv_tau = ad.exp(ad.scale(log_tau, -1.0))
    logits = ad.mul(cos, ad.broadcast_scalar(inv_tau, b, u))
    per_row = ad.nll_indexed_softmax(logits, labels)
    loss = ad.mean_rows(per_row)
    return loss


def symmetric_ac_loss(feats: Tensor, class_feats: Tensor,
                      labels: Sequence[int], log_tau: Tensor) -> Tensor:
    """Average of image->text and text->image directions.

    The reverse direction treats each class row as a query over the batch;
    its positives are the batch rows carrying that label, approximated here
    by the first matching row (adequate for the tiny few-shot batches this
    engine trains on).
    """
    fwd = ac_loss(feats, class_feats, labels, log_tau)
    rev_labels = []
    for c in range(class_feats.shape[0]):
        matches = [i for i, y in enumerate(labels) if y == c]
        if not matches:
            return fwd
        rev_labels.append(matches[0])
    rev = ac_loss(class_feats, feats, rev_labels, log_tau)
    return ad.scale(ad.add(fwd, rev), 0.5)


def total_loss(model, bags, labels) -> tuple[Tensor, dict[str, float]]:
    """Spec surface for the combined objective; delegates to the model.

    Returns the scalar root tensor and a per-component breakdown
    (``l_t``/``l_s``/``l_p``/``total`` plus any regularizer).
    """
    return model.training_loss(bags, labels)


def predict_probs(feat: np.ndarray, class_feats: np.ndarray,
                  tau: float) -> np.ndarray:
    """Softmax over cos/tau; plain numpy, used at test time."""
    feat = np.asarray(feat, dtype=np.float64).reshape(-1)
    if tau <= 0:
        raise LossError(f"tau must be positive, got {tau}")
    fn = np.linalg.norm(feat)
    cn = np.linalg.norm(class_feats, axis=1)
    if abs(fn - 1.0) > 1e-6 or np.abs(cn - 1.0).max() > 1e-6:
        raise LossError("predict_probs expects unit-norm inputs")
    z = (class_feats @ feat) / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()
