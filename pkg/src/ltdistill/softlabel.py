"""Per-epoch teacher soft labels, the EP-k reuse schedule, ensemble averaging."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .model import MlpModel, forward
from .numcore import DomainError, RngStream, softmax


def model_checksum(model: MlpModel) -> str:
    h = hashlib.sha256()
    h.update(repr((model.dims, model.activation)).encode())
    for p in model.params:
        h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class SoftLabelSet:
    """Logits stored per label-epoch: shape ``(k, M, K)``.

    ``tau`` is the logit-adjustment strength already folded into the
    logits (0 for raw teacher outputs).
    """

    logits: np.ndarray
    jitter_sigma: float = 0.0
    teacher_ids: tuple = ()
    tau: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.logits, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise DomainError(f"soft labels must be (k, M, K) with k >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("soft-label logits must be finite")
        if self.jitter_sigma < 0:
            raise DomainError("jitter_sigma must be >= 0")
        object.__setattr__(self, "logits", arr)

    @property
    def num_epochs(self) -> int:
        return self.logits.shape[0]

    @property
    def shape(self) -> tuple:
        return self.logits.shape

    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)


def relabel(teacher: MlpModel, features, k: int, jitter_sigma: float,
            rng: RngStream) -> SoftLabelSet:
    """Teacher logits on ``features + eps_e`` for label-epochs ``e < k``.

    ``eps_e ~ N(0, jitter_sigma^2)`` i.i.d. per epoch from child stream ``e``;
    with zero jitter every slice equals the plain forward pass.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    slices = []
    for e in range(k):
        xe = x
        if jitter_sigma > 0:
            xe = x + jitter_sigma * rng.child("epoch", e).generator().standard_normal(x.shape)
        slices.append(forward(teacher, xe)[0])
    return SoftLabelSet(np.stack(slices), float(jitter_sigma), (model_checksum(teacher),))


def epk_schedule(k: int, epoch: int) -> int:
    """Label slice used at training epoch ``epoch`` under an EP-k budget."""
    if k < 1:
        raise DomainError("k must be >= 1")
    if epoch < 0:
        raise DomainError("epoch must be >= 0")
    return epoch % k


def ensemble_mean_probs(prob_slices) -> np.ndarray:
    """Element-wise mean of equally-shaped probability tables."""
    arrs = [np.asarray(p, dtype=np.float64) for p in prob_slices]
    if not arrs:
        raise DomainError("need at least one probability table")
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise DomainError(f"shape mismatch: {a.shape} vs {shape}")
    total = np.zeros(shape)
    for a in arrs:
        total += a
    return total / len(arrs)
